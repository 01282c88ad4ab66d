use crate::image::Mask;
use crate::optimize::EditableSet;
use crate::prelude::*;
use crate::render::{is_culled, NEAR_PLANE};
use crate::scene::{CameraView, GaussianCloud};

/// Gaussians whose center lands inside the garment mask in at least a
/// `rho` fraction of the views that see it.
///
/// A view "sees" a Gaussian when the renderer would not cull it. Gaussians
/// no view sees are not editable.
pub fn track_editable_gaussians(cloud: &GaussianCloud, views: &[(CameraView, Mask)], rho: f64) -> EditableSet {
    let mut flags = Vec::with_capacity(cloud.len());
    for g in cloud.iter() {
        let (mut seen, mut inside) = (0usize, 0usize);
        for (cam, mask) in views {
            let t = cam.to_camera(g.position());
            if !(t[2] > NEAR_PLANE) {
                continue;
            }
            let p = cam.project_camera_point(t);
            if is_culled(cam, t, p) {
                continue;
            }
            seen += 1;
            let (w, h) = mask.dims();
            if p[0] >= 0.0 && p[1] >= 0.0 && (p[0] as usize) < w && (p[1] as usize) < h && mask.get(p[0] as usize, p[1] as usize) {
                inside += 1;
            }
        }
        flags.push(seen > 0 && inside as f64 >= rho * seen as f64);
    }
    EditableSet::from_indices(cloud.len(), flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i))
        .expect("indices come from the cloud")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::mat4_identity;
    use crate::Gaussian;

    #[test]
    fn threshold_semantics() {
        let cam = CameraView::new(mat4_identity(), [10.0, 10.0], [4.0, 4.0], 8, 8, 0).unwrap();
        let g = |x: f64| Gaussian::with_color([x, 0.0, 5.0], [1.0, 0.0, 0.0, 0.0], [0.1; 3], 0.5, [0.5; 3]).unwrap();
        let cloud = GaussianCloud::new(vec![g(0.0), g(1.5)]).unwrap();
        let left = Mask::from_fn(8, 8, |x, _| x < 5);
        let set = track_editable_gaussians(&cloud, &[(cam.clone(), left.clone())], 0.6);
        assert_eq!(set.indices().collect::<Vec<_>>(), vec![0]);
        let views = [(cam.clone(), left.clone()), (cam.clone(), left), (cam.clone(), Mask::new(8, 8, false))];
        assert_eq!(track_editable_gaussians(&cloud, &views, 0.6).count(), 1);
        assert_eq!(track_editable_gaussians(&cloud, &views, 1.0).count(), 0);
        assert_eq!(track_editable_gaussians(&cloud, &[], 0.6).count(), 0);
    }
}
