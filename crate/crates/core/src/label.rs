//! Static/dynamic ray classification from instance masks.
//!
//! LiDAR endpoints are projected into the cameras and matched against
//! per-instance masks: a covering mask with confidence >= 0.5 makes the point
//! a dynamic candidate, no covering mask of confidence >= 0.3 makes it
//! static, anything in between is discarded. Candidates are then voxelized
//! and cleaned per mask with a 26-connected-component pass that keeps only
//! the largest cluster; demoted points fall back to static.

use nalgebra::Isometry3;

use crate::grid::GridSpec;
use crate::scene::{Mask, PinholeSpec, RayBatch, RayLabel};

pub const DYNAMIC_CONFIDENCE: f64 = 0.5;
pub const STATIC_CONFIDENCE: f64 = 0.3;

/// Instance masks grouped by (frame, camera).
#[derive(Debug, Clone, Default)]
pub struct MaskSet {
    pub entries: Vec<FrameMasks>,
}

#[derive(Debug, Clone)]
pub struct FrameMasks {
    pub frame: i64,
    pub camera: usize,
    pub masks: Vec<Mask>,
}

impl MaskSet {
    pub fn masks_for(&self, frame: i64, camera: usize) -> &[Mask] {
        self.entries
            .iter()
            .find(|e| e.frame == frame && e.camera == camera)
            .map(|e| e.masks.as_slice())
            .unwrap_or(&[])
    }
}

/// Voxel labeling into maximal 26-connected components. Label 0 is empty;
/// component labels are assigned in scan order of their first voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelClusterLabels {
    pub dims: [usize; 3],
    pub labels: Vec<u32>,
    /// `sizes[l - 1]` is the voxel count of component `l`.
    pub sizes: Vec<usize>,
}

impl VoxelClusterLabels {
    pub fn component_count(&self) -> usize {
        self.sizes.len()
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new() -> Self {
        UnionFind { parent: Vec::new() }
    }
    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let up = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = up;
            x = up;
        }
        x
    }
    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so provisional ordering stays scan-stable.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Two-pass union-find labeling with a full 3x3x3 neighborhood.
pub fn connected_components_3d(occupied: &[bool], dims: [usize; 3]) -> VoxelClusterLabels {
    assert_eq!(occupied.len(), dims[0] * dims[1] * dims[2]);
    let idx = |i: usize, j: usize, k: usize| i + dims[0] * (j + dims[1] * k);
    let mut provisional = vec![u32::MAX; occupied.len()];
    let mut uf = UnionFind::new();

    // Offsets strictly earlier in scan order (x fastest, then y, then z).
    let mut offsets: Vec<(isize, isize, isize)> = Vec::new();
    for dk in -1isize..=1 {
        for dj in -1isize..=1 {
            for di in -1isize..=1 {
                if dk < 0 || (dk == 0 && dj < 0) || (dk == 0 && dj == 0 && di < 0) {
                    offsets.push((di, dj, dk));
                }
            }
        }
    }
    debug_assert_eq!(offsets.len(), 13);

    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let here = idx(i, j, k);
                if !occupied[here] {
                    continue;
                }
                let mut assigned: Option<u32> = None;
                for &(di, dj, dk) in &offsets {
                    let (ni, nj, nk) = (i as isize + di, j as isize + dj, k as isize + dk);
                    if ni < 0 || nj < 0 || nk < 0
                        || ni >= dims[0] as isize || nj >= dims[1] as isize || nk >= dims[2] as isize
                    {
                        continue;
                    }
                    let n = idx(ni as usize, nj as usize, nk as usize);
                    if !occupied[n] {
                        continue;
                    }
                    let nl = provisional[n];
                    match assigned {
                        None => assigned = Some(nl),
                        Some(l) => uf.union(l, nl),
                    }
                }
                provisional[here] = match assigned {
                    Some(l) => l,
                    None => uf.make(),
                };
            }
        }
    }

    // Second pass: compress roots and renumber by first occurrence.
    let mut labels = vec![0u32; occupied.len()];
    let mut root_to_label: Vec<u32> = vec![0; uf.parent.len()];
    let mut sizes = Vec::new();
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let here = idx(i, j, k);
                if !occupied[here] {
                    continue;
                }
                let root = uf.find(provisional[here]);
                if root_to_label[root as usize] == 0 {
                    sizes.push(0);
                    root_to_label[root as usize] = sizes.len() as u32;
                }
                let label = root_to_label[root as usize];
                labels[here] = label;
                sizes[(label - 1) as usize] += 1;
            }
        }
    }
    VoxelClusterLabels { dims, labels, sizes }
}

/// Classify the rays of a LiDAR batch against instance masks.
///
/// `ego_pose` is the ego-to-world transform at the batch's frame;
/// voxelization runs in ego coordinates at the field grid resolution.
pub fn classify_rays(
    batch: &RayBatch,
    masks: &MaskSet,
    cams: &[PinholeSpec],
    ego_pose: &Isometry3<f64>,
    spec: &GridSpec,
) -> Vec<RayLabel> {
    #[derive(Clone, Copy)]
    enum Pending {
        Fixed(RayLabel),
        /// Candidate dynamic, associated with (camera, mask index).
        Candidate { camera: usize, mask: usize, cell: [usize; 3] },
    }

    let world_to_ego = ego_pose.inverse();
    let mut pending: Vec<Pending> = Vec::with_capacity(batch.rays.len());

    for ray in &batch.rays {
        let Some(end_world) = ray.endpoint() else {
            pending.push(Pending::Fixed(RayLabel::Static));
            continue;
        };
        let mut best: Option<(f64, usize, usize)> = None; // (confidence, cam, mask)
        let mut max_cover_conf = 0.0f64;
        let mut in_front_of_any = false;
        for (ci, cam) in cams.iter().enumerate() {
            let cam_pose = ego_pose * cam.pose_in_ego();
            let p_cam = cam_pose.inverse() * nalgebra::Point3::from(end_world);
            let Some(uv) = cam.project(&p_cam.coords) else {
                continue;
            };
            in_front_of_any = true;
            if !cam.in_bounds(uv) {
                continue;
            }
            for (mi, mask) in masks.masks_for(batch.frame, ci).iter().enumerate() {
                if mask.covers(uv) {
                    max_cover_conf = max_cover_conf.max(mask.confidence);
                    if mask.confidence >= DYNAMIC_CONFIDENCE
                        && best.map_or(true, |(c, _, _)| mask.confidence > c)
                    {
                        best = Some((mask.confidence, ci, mi));
                    }
                }
            }
        }
        if !in_front_of_any && !cams.is_empty() {
            pending.push(Pending::Fixed(RayLabel::Discard));
            continue;
        }
        let next = match best {
            Some((_, camera, mask)) => {
                let end_ego = world_to_ego * nalgebra::Point3::from(end_world);
                if spec.contains(&end_ego.coords) {
                    Pending::Candidate { camera, mask, cell: spec.nearest_cell(&end_ego.coords) }
                } else {
                    Pending::Fixed(RayLabel::Static)
                }
            }
            None if max_cover_conf >= STATIC_CONFIDENCE => Pending::Fixed(RayLabel::Discard),
            None => Pending::Fixed(RayLabel::Static),
        };
        pending.push(next);
    }

    // Largest-cluster cleanup per mask group.
    let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    for (ri, p) in pending.iter().enumerate() {
        if let Pending::Candidate { camera, mask, .. } = p {
            match groups.iter_mut().find(|(key, _)| *key == (*camera, *mask)) {
                Some((_, rays)) => rays.push(ri),
                None => groups.push(((*camera, *mask), vec![ri])),
            }
        }
    }
    let mut labels: Vec<RayLabel> = pending
        .iter()
        .map(|p| match p {
            Pending::Fixed(l) => *l,
            Pending::Candidate { .. } => RayLabel::Dynamic,
        })
        .collect();
    for (_, ray_indices) in &groups {
        let mut occupied = vec![false; spec.cell_count()];
        for &ri in ray_indices {
            if let Pending::Candidate { cell, .. } = pending[ri] {
                occupied[spec.index(cell[0], cell[1], cell[2])] = true;
            }
        }
        let cc = connected_components_3d(&occupied, spec.dims);
        if cc.sizes.is_empty() {
            continue;
        }
        // Ties break toward the smallest label, i.e. earliest in scan order.
        let largest = 1 + cc
            .sizes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap()
            .0 as u32;
        for &ri in ray_indices {
            if let Pending::Candidate { cell, .. } = pending[ri] {
                if cc.labels[spec.index(cell[0], cell[1], cell[2])] != largest {
                    labels[ri] = RayLabel::Static;
                }
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{
        make_batches, BatchOptions, EgoTrajectory, LidarSpec, PrimitiveShape, SceneOracle,
        ScenePrimitive,
    };
    use nalgebra::Vector3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims_index(dims: [usize; 3], i: usize, j: usize, k: usize) -> usize {
        i + dims[0] * (j + dims[1] * k)
    }

    /// Independent flood-fill oracle used to check the union-find pass.
    fn bfs_components(occupied: &[bool], dims: [usize; 3]) -> Vec<u32> {
        let mut labels = vec![0u32; occupied.len()];
        let mut next = 0u32;
        for start in 0..occupied.len() {
            if !occupied[start] || labels[start] != 0 {
                continue;
            }
            next += 1;
            let mut queue = std::collections::VecDeque::from([start]);
            labels[start] = next;
            while let Some(cur) = queue.pop_front() {
                let i = cur % dims[0];
                let j = (cur / dims[0]) % dims[1];
                let k = cur / (dims[0] * dims[1]);
                for dk in -1isize..=1 {
                    for dj in -1isize..=1 {
                        for di in -1isize..=1 {
                            if di == 0 && dj == 0 && dk == 0 {
                                continue;
                            }
                            let (ni, nj, nk) =
                                (i as isize + di, j as isize + dj, k as isize + dk);
                            if ni < 0 || nj < 0 || nk < 0
                                || ni >= dims[0] as isize
                                || nj >= dims[1] as isize
                                || nk >= dims[2] as isize
                            {
                                continue;
                            }
                            let n = dims_index(dims, ni as usize, nj as usize, nk as usize);
                            if occupied[n] && labels[n] == 0 {
                                labels[n] = labels[cur];
                                queue.push_back(n);
                            }
                        }
                    }
                }
            }
        }
        labels
    }

    fn same_partition(a: &[u32], b: &[u32]) -> bool {
        // Labels may differ by renaming; require a consistent bijection.
        let mut fwd = std::collections::HashMap::new();
        let mut bwd = std::collections::HashMap::new();
        for (&x, &y) in a.iter().zip(b) {
            if (x == 0) != (y == 0) {
                return false;
            }
            if x == 0 {
                continue;
            }
            if *fwd.entry(x).or_insert(y) != y || *bwd.entry(y).or_insert(x) != x {
                return false;
            }
        }
        true
    }

    #[test]
    fn empty_grid_has_no_components() {
        let cc = connected_components_3d(&vec![false; 27], [3, 3, 3]);
        assert_eq!(cc.component_count(), 0);
        assert!(cc.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn corner_touching_voxels_join() {
        let dims = [3, 3, 3];
        let mut occ = vec![false; 27];
        occ[dims_index(dims, 0, 0, 0)] = true;
        occ[dims_index(dims, 1, 1, 1)] = true;
        let cc = connected_components_3d(&occ, dims);
        assert_eq!(cc.component_count(), 1);
        assert_eq!(cc.sizes, vec![2]);
    }

    #[test]
    fn random_grids_match_bfs_oracle() {
        let dims = [16, 16, 16];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for fill in [0.05, 0.2, 0.5] {
            for _ in 0..20 {
                let occ: Vec<bool> = (0..dims[0] * dims[1] * dims[2])
                    .map(|_| rng.gen::<f64>() < fill)
                    .collect();
                let cc = connected_components_3d(&occ, dims);
                let oracle = bfs_components(&occ, dims);
                assert!(same_partition(&cc.labels, &oracle));
                // Size bookkeeping is consistent.
                let total: usize = cc.sizes.iter().sum();
                assert_eq!(total, occ.iter().filter(|&&o| o).count());
            }
        }
    }

    #[test]
    fn labeling_is_idempotent() {
        let dims = [8, 8, 8];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let occ: Vec<bool> = (0..512).map(|_| rng.gen::<f64>() < 0.3).collect();
        let first = connected_components_3d(&occ, dims);
        let again = connected_components_3d(&occ, dims);
        assert_eq!(first, again);
        // Relabeling each component's own voxels reproduces the partition.
        for label in 1..=first.component_count() as u32 {
            let only: Vec<bool> = first.labels.iter().map(|&l| l == label).collect();
            let sub = connected_components_3d(&only, dims);
            assert_eq!(sub.component_count(), 1);
        }
    }

    fn mover_scene() -> SceneOracle {
        let spec = GridSpec::new(
            Vector3::new(-6.4, -6.4, -3.2),
            Vector3::new(12.8, 12.8, 6.4),
            0.2,
        )
        .unwrap();
        let ground = ScenePrimitive {
            shape: PrimitiveShape::GroundPlane { height: -1.5 },
            center: [0.0; 3],
            velocity: [0.0; 3],
            albedo: [0.4, 0.4, 0.4],
            dynamic: false,
        };
        let mover = ScenePrimitive {
            shape: PrimitiveShape::Sphere { radius: 0.8 },
            center: [3.5, 0.5, -0.5],
            velocity: [0.4, 0.0, 0.0],
            albedo: [0.9, 0.1, 0.1],
            dynamic: true,
        };
        SceneOracle::new(vec![ground, mover], 0.1, spec, EgoTrajectory::stationary()).unwrap()
    }

    fn forward_lidar() -> LidarSpec {
        // Dense enough that adjacent returns on a 3.5 m target land in
        // 26-adjacent voxels at 0.2 m resolution.
        LidarSpec {
            azimuth_count: 160,
            elevation_count: 24,
            azimuth_range: (-0.8, 0.8),
            elevation_range: (-0.5, 0.2),
            origin_in_ego: [0.0, 0.0, 0.0],
        }
    }

    fn forward_cam() -> PinholeSpec {
        PinholeSpec::with_fov(96, 64, 1.4, [0.0, 0.0, 0.3])
    }

    #[test]
    fn empty_masks_label_everything_static() {
        let oracle = mover_scene();
        let batches = make_batches(&oracle, &[], Some(&forward_lidar()), 0..=0, 5, BatchOptions::default()).unwrap();
        let labels = classify_rays(
            &batches[0],
            &MaskSet::default(),
            &[forward_cam()],
            &oracle.ego.pose(0.0),
            &oracle.spec,
        );
        assert!(labels.iter().all(|&l| l == RayLabel::Static));
    }

    #[test]
    fn exact_masks_reproduce_oracle_dynamic_labels() {
        let oracle = mover_scene();
        // Camera co-located with the LiDAR so only pixel quantization, not
        // parallax, can disagree with the oracle at the silhouette.
        let mut cam = forward_cam();
        cam.position_in_ego = [0.0, 0.0, 0.0];
        let batches = make_batches(&oracle, &[], Some(&forward_lidar()), 0..=0, 5, BatchOptions::default()).unwrap();
        let masks = MaskSet {
            entries: vec![FrameMasks {
                frame: 0,
                camera: 0,
                masks: oracle.render_instance_masks(&cam, 0, 1.0),
            }],
        };
        let labels = classify_rays(&batches[0], &masks, &[cam], &oracle.ego.pose(0.0), &oracle.spec);
        let cam_pose = oracle.ego.pose(0.0) * cam.pose_in_ego();
        let cam_origin = (cam_pose * nalgebra::Point3::origin()).coords;
        let mut dynamic_found = 0;
        let mut mislabeled = 0;
        for (ray, label) in batches[0].rays.iter().zip(&labels) {
            if ray.gt_hit_dynamic {
                dynamic_found += 1;
                if *label != RayLabel::Dynamic {
                    mislabeled += 1;
                    // Must be a silhouette pixel: the ray through the pixel
                    // center misses the mover even though this ray hit it.
                    let end = ray.endpoint().unwrap();
                    let p_cam = cam_pose.inverse() * nalgebra::Point3::from(end);
                    let (u, v) = cam.project(&p_cam.coords).unwrap();
                    let dir = cam_pose.rotation * cam.pixel_ray(u as usize, v as usize);
                    let center_dynamic = oracle
                        .cast_ray(&cam_origin, &dir, 0.0)
                        .map(|h| h.dynamic)
                        .unwrap_or(false);
                    assert!(!center_dynamic, "non-silhouette dynamic point mislabeled");
                }
            } else {
                assert_ne!(*label, RayLabel::Dynamic, "static point kept a dynamic label");
            }
        }
        assert!(dynamic_found > 10);
        assert!(
            (mislabeled as f64) < 0.2 * dynamic_found as f64,
            "{mislabeled} of {dynamic_found} dynamic points mislabeled"
        );
    }

    #[test]
    fn low_confidence_masks_discard() {
        let oracle = mover_scene();
        let cam = forward_cam();
        let batches = make_batches(&oracle, &[], Some(&forward_lidar()), 0..=0, 5, BatchOptions::default()).unwrap();
        let masks = MaskSet {
            entries: vec![FrameMasks {
                frame: 0,
                camera: 0,
                masks: oracle.render_instance_masks(&cam, 0, 0.4),
            }],
        };
        let labels = classify_rays(&batches[0], &masks, &[cam], &oracle.ego.pose(0.0), &oracle.spec);
        let cam_pose = oracle.ego.pose(0.0) * cam.pose_in_ego();
        let mut discarded = 0;
        for (ray, label) in batches[0].rays.iter().zip(&labels) {
            if !ray.gt_hit_dynamic {
                continue;
            }
            // Silhouette pixels may fall outside the mask and stay static;
            // points whose pixel is mask-covered must be discarded.
            let end = ray.endpoint().unwrap();
            let p_cam = cam_pose.inverse() * nalgebra::Point3::from(end);
            let covered = cam
                .project(&p_cam.coords)
                .map(|uv| masks.masks_for(0, 0).iter().any(|m| m.covers(uv)))
                .unwrap_or(false);
            if covered {
                assert_eq!(*label, RayLabel::Discard);
                discarded += 1;
            }
        }
        assert!(discarded > 10);
    }

    #[test]
    fn detached_small_cluster_is_demoted() {
        let oracle = mover_scene();
        let cam = forward_cam();
        // Hand-built batch: 10 endpoints inside the mover plus 2 far-away
        // endpoints that the (synthetically enlarged) mask also covers.
        let mut rays = Vec::new();
        let origin = Vector3::new(0.0, 0.0, 0.0);
        for n in 0..10 {
            let target = Vector3::new(3.4 + 0.1 * (n % 3) as f64, 0.4 + 0.1 * (n / 3) as f64, -0.5);
            let dir = (target - origin).normalize();
            rays.push(crate::scene::Ray {
                origin: [0.0; 3],
                dir: [dir.x, dir.y, dir.z],
                gt_range: (target - origin).norm(),
                gt_color: [0.9, 0.1, 0.1],
                label: RayLabel::Dynamic,
                pixel: None,
                gt_hit_dynamic: true,
            });
        }
        for n in 0..2 {
            let target = Vector3::new(5.9, 2.8 + 0.1 * n as f64, -0.5);
            let dir = (target - origin).normalize();
            rays.push(crate::scene::Ray {
                origin: [0.0; 3],
                dir: [dir.x, dir.y, dir.z],
                gt_range: (target - origin).norm(),
                gt_color: [0.4, 0.4, 0.4],
                label: RayLabel::Static,
                pixel: None,
                gt_hit_dynamic: false,
            });
        }
        let batch = RayBatch {
            frame: 0,
            kind: crate::scene::SensorKind::Lidar,
            samples_per_ray: 16,
            rays,
        };
        // A single all-covering mask: every endpoint is a dynamic candidate.
        let masks = MaskSet {
            entries: vec![FrameMasks {
                frame: 0,
                camera: 0,
                masks: vec![Mask {
                    width: cam.width,
                    height: cam.height,
                    pixels: vec![true; cam.width * cam.height],
                    confidence: 1.0,
                }],
            }],
        };
        let labels = classify_rays(&batch, &masks, &[cam], &oracle.ego.pose(0.0), &oracle.spec);
        assert!(labels[..10].iter().all(|&l| l == RayLabel::Dynamic));
        assert!(labels[10..].iter().all(|&l| l == RayLabel::Static));
    }

    #[test]
    fn label_partition_is_input_order_independent() {
        let oracle = mover_scene();
        let cam = forward_cam();
        let batches = make_batches(&oracle, &[], Some(&forward_lidar()), 0..=0, 5, BatchOptions::default()).unwrap();
        let masks = MaskSet {
            entries: vec![FrameMasks {
                frame: 0,
                camera: 0,
                masks: oracle.render_instance_masks(&cam, 0, 1.0),
            }],
        };
        let base = classify_rays(&batches[0], &masks, &[cam], &oracle.ego.pose(0.0), &oracle.spec);
        let mut reversed = batches[0].clone();
        reversed.rays.reverse();
        let mut rev_labels =
            classify_rays(&reversed, &masks, &[cam], &oracle.ego.pose(0.0), &oracle.spec);
        rev_labels.reverse();
        assert_eq!(base, rev_labels);
    }

    #[test]
    fn endpoint_behind_all_cameras_is_discarded() {
        let oracle = mover_scene();
        let cam = forward_cam();
        let behind = Vector3::new(-4.0, 0.0, -0.5);
        let dir = behind.normalize();
        let batch = RayBatch {
            frame: 0,
            kind: crate::scene::SensorKind::Lidar,
            samples_per_ray: 16,
            rays: vec![crate::scene::Ray {
                origin: [0.0; 3],
                dir: [dir.x, dir.y, dir.z],
                gt_range: behind.norm(),
                gt_color: [0.4; 3],
                label: RayLabel::Static,
                pixel: None,
                gt_hit_dynamic: false,
            }],
        };
        let masks = MaskSet {
            entries: vec![FrameMasks { frame: 0, camera: 0, masks: vec![] }],
        };
        let labels = classify_rays(&batch, &masks, &[cam], &oracle.ego.pose(0.0), &oracle.spec);
        assert_eq!(labels[0], RayLabel::Discard);
    }
}

