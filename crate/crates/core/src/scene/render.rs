use super::{Scene, ShapeSpec};
use crate::geometry::{CameraModel, PoseSE2};
use crate::numerics::Grid;

/// RGB plus depth.
pub const OBS_CHANNELS: usize = 4;
pub const DEPTH_CHANNEL: usize = 3;
/// Flat fill of fixtures and kit slots.
pub const FIXTURE_COLOR: [f64; 3] = [0.45, 0.45, 0.45];

/// Per-pixel painter's rasterization: fixtures first at depth 0, then
/// objects with their colour and top-surface height. The background is
/// black at depth 0. Values are rounded to 32-bit floats so observations
/// survive persistence unchanged.
pub fn render(scene: &Scene, cam: &CameraModel) -> Grid {
    let (h, w) = (cam.height, cam.width);
    let mut obs = Grid::zeros(&[h, w, OBS_CHANNELS]);
    for t in &scene.targets {
        paint(&mut obs, cam, &t.shape, &t.pose, FIXTURE_COLOR, 0.0);
    }
    for o in &scene.objects {
        paint(&mut obs, cam, &o.shape, &o.pose, o.shape.color, o.shape.height);
    }
    obs
}

fn paint(obs: &mut Grid, cam: &CameraModel, spec: &ShapeSpec, pose: &PoseSE2, color: [f64; 3], height: f64) {
    let (h, w) = (cam.height as i64, cam.width as i64);
    let r = super::polygon::radius(&spec.footprint);
    let (row, col) = cam.world_to_pixel_f([pose.x, pose.y]);
    let rp = r * cam.pixels_per_metre + 1.0;
    let u0 = ((row - rp).floor() as i64).max(0);
    let u1 = ((row + rp).ceil() as i64).min(h - 1);
    let v0 = ((col - rp).floor() as i64).max(0);
    let v1 = ((col + rp).ceil() as i64).min(w - 1);
    let px = [
        color[0] as f32 as f64,
        color[1] as f32 as f64,
        color[2] as f32 as f64,
        height as f32 as f64,
    ];
    let width = cam.width;
    let values = obs.values_mut();
    for u in u0..=u1 {
        for v in v0..=v1 {
            let p = cam.pixel_centre(u as f64, v as f64);
            if spec.covers(pose.apply_inverse(p)) {
                let o = (u as usize * width + v as usize) * 4;
                values[o..o + 4].copy_from_slice(&px);
            }
        }
    }
}
