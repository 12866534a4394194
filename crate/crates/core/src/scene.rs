//! Moving-shapes scene specification and exact rasterization.
//!
//! Rendering is anti-aliasing-free: a pixel belongs to a shape iff its
//! integer lattice point passes the shape's membership test, so every mask
//! is exactly recoverable from the spec. Overlaps resolve by depth order
//! (later objects occlude earlier ones) and occluder bars are drawn topmost.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::BBox;
use crate::mask::BinaryMask;
use crate::vocab::{Color, Direction, ShapeKind};

pub const BACKGROUND_RGB: [u8; 3] = [26, 26, 26];
pub const OCCLUDER_RGB: [u8; 3] = [130, 130, 130];

/// One object: shape, color, half-size and a linear bouncing trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub color: Color,
    /// Half-extent in pixels (circle radius / square half-side / triangle half-height).
    pub size_px: f64,
    pub start: (f64, f64),
    /// Velocity in pixels per frame (vx, vy).
    pub velocity: (f64, f64),
    /// Frames (inclusive range) during which an occluder bar covers the object.
    pub occlusion: Option<(usize, usize)>,
    /// Frames (inclusive range) during which the object is absent.
    pub disappear: Option<(usize, usize)>,
}

impl ObjectSpec {
    /// Dominant-axis motion direction, if the object moves.
    pub fn direction(&self) -> Option<Direction> {
        Direction::from_velocity(self.velocity.0, self.velocity.1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub height: usize,
    pub width: usize,
    pub frame_count: usize,
    pub rng_seed: u64,
}

/// Reflect `p` into `[lo, hi]` (triangle-wave folding).
fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    let mut q = (p - lo).rem_euclid(2.0 * span);
    if q > span {
        q = 2.0 * span - q;
    }
    lo + q
}

/// Object center at frame `t`, bouncing off walls so the shape stays inside.
pub fn center_at(obj: &ObjectSpec, t: usize, w: usize, h: usize) -> (f64, f64) {
    let m = obj.size_px;
    let cx = reflect(
        obj.start.0 + obj.velocity.0 * t as f64,
        m,
        (w - 1) as f64 - m,
    );
    let cy = reflect(
        obj.start.1 + obj.velocity.1 * t as f64,
        m,
        (h - 1) as f64 - m,
    );
    (cx, cy)
}

fn in_interval(t: usize, iv: Option<(usize, usize)>) -> bool {
    matches!(iv, Some((a, b)) if t >= a && t <= b)
}

/// Membership test of lattice point (x=j, y=i) against a shape at (cx, cy).
fn member(shape: ShapeKind, cx: f64, cy: f64, s: f64, j: usize, i: usize) -> bool {
    let (x, y) = (j as f64, i as f64);
    match shape {
        ShapeKind::Circle => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= s * s,
        ShapeKind::Square => (x - cx).abs() <= s && (y - cy).abs() <= s,
        ShapeKind::Triangle => {
            // apex up: halfwidth grows from 0 at the apex row to s at the base
            let top = cy - s;
            y >= top && y <= cy + s && (x - cx).abs() <= 0.5 * (y - top)
        }
    }
}

/// One rendered frame with exact per-object visible masks.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    /// `[3,H,W]`, values in `[0,1]`.
    pub image: Array3<f32>,
    /// Visible (post-occlusion) mask per object.
    pub masks: Vec<BinaryMask>,
    /// Tight box per visible object.
    pub boxes: Vec<Option<BBox>>,
    /// True when the object has at least one visible pixel this frame.
    pub visibility: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub spec: SceneSpec,
    pub frames: Vec<RenderedFrame>,
}

/// Rasterize the whole scene. Fails if an object cannot fit the canvas.
pub fn generate_scene(spec: &SceneSpec) -> Result<RenderedScene> {
    let (h, w) = (spec.height, spec.width);
    for (i, obj) in spec.objects.iter().enumerate() {
        if 2.0 * obj.size_px + 1.0 > h.min(w) as f64 || obj.size_px < 1.0 {
            return Err(CoreError::ObjectTooLarge { index: i, h, w });
        }
    }
    let mut frames = Vec::with_capacity(spec.frame_count);
    for t in 0..spec.frame_count {
        frames.push(render_frame(spec, t));
    }
    Ok(RenderedScene {
        spec: spec.clone(),
        frames,
    })
}

fn render_frame(spec: &SceneSpec, t: usize) -> RenderedFrame {
    let (h, w) = (spec.height, spec.width);
    let n = spec.objects.len();
    // winner index per pixel: -1 background, -2 occluder, k >= 0 object k
    let mut winner = Array2::<i32>::from_elem((h, w), -1);

    let centers: Vec<(f64, f64)> = spec
        .objects
        .iter()
        .map(|o| center_at(o, t, w, h))
        .collect();

    for (k, obj) in spec.objects.iter().enumerate() {
        if in_interval(t, obj.disappear) {
            continue;
        }
        let (cx, cy) = centers[k];
        let s = obj.size_px;
        let j0 = ((cx - s).floor().max(0.0)) as usize;
        let j1 = ((cx + s).ceil().min((w - 1) as f64)) as usize;
        let i0 = ((cy - s).floor().max(0.0)) as usize;
        let i1 = ((cy + s).ceil().min((h - 1) as f64)) as usize;
        for i in i0..=i1 {
            for j in j0..=j1 {
                if member(obj.shape, cx, cy, s, j, i) {
                    winner[[i, j]] = k as i32;
                }
            }
        }
    }

    // occluder bars, drawn topmost, centered on the occluded object
    for (k, obj) in spec.objects.iter().enumerate() {
        if !in_interval(t, obj.occlusion) || in_interval(t, obj.disappear) {
            continue;
        }
        let (cx, cy) = centers[k];
        let half_w = (obj.size_px * 0.5).max(1.0);
        let half_h = obj.size_px * 2.0;
        let j0 = ((cx - half_w).floor().max(0.0)) as usize;
        let j1 = ((cx + half_w).ceil().min((w - 1) as f64)) as usize;
        let i0 = ((cy - half_h).floor().max(0.0)) as usize;
        let i1 = ((cy + half_h).ceil().min((h - 1) as f64)) as usize;
        for i in i0..=i1 {
            for j in j0..=j1 {
                winner[[i, j]] = -2;
            }
        }
    }

    let mut image = Array3::<f32>::zeros((3, h, w));
    let mut grids = vec![Array2::<u8>::zeros((h, w)); n];
    for i in 0..h {
        for j in 0..w {
            let rgb = match winner[[i, j]] {
                -1 => BACKGROUND_RGB,
                -2 => OCCLUDER_RGB,
                k => {
                    grids[k as usize][[i, j]] = 1;
                    spec.objects[k as usize].color.rgb()
                }
            };
            for c in 0..3 {
                image[[c, i, j]] = rgb[c] as f32 / 255.0;
            }
        }
    }
    let masks: Vec<BinaryMask> = grids
        .into_iter()
        .map(|g| BinaryMask::new(g).expect("rendered masks are binary"))
        .collect();
    let boxes: Vec<Option<BBox>> = masks.iter().map(|m| m.tight_box()).collect();
    let visibility: Vec<bool> = masks.iter().map(|m| !m.is_empty()).collect();
    RenderedFrame {
        image,
        masks,
        boxes,
        visibility,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle_spec(r: f64, frames: usize) -> SceneSpec {
        SceneSpec {
            objects: vec![ObjectSpec {
                shape: ShapeKind::Circle,
                color: Color::Red,
                size_px: r,
                start: (32.0, 32.0),
                velocity: (0.0, 0.0),
                occlusion: None,
                disappear: None,
            }],
            height: 64,
            width: 64,
            frame_count: frames,
            rng_seed: 0,
        }
    }

    /// Independent lattice-point count for the discrete disk.
    fn disk_lattice_count(cx: f64, cy: f64, r: f64) -> usize {
        let mut n = 0;
        for i in 0..64 {
            for j in 0..64 {
                let (x, y) = (j as f64, i as f64);
                if (x - cx).powi(2) + (y - cy).powi(2) <= r * r {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn static_circle_mask_area_matches_lattice_count() {
        let scene = generate_scene(&circle_spec(9.0, 1)).unwrap();
        let area = scene.frames[0].masks[0].area();
        assert_eq!(area, disk_lattice_count(32.0, 32.0, 9.0));
    }

    #[test]
    fn zero_objects_yields_background_only() {
        let spec = SceneSpec {
            objects: vec![],
            height: 32,
            width: 32,
            frame_count: 2,
            rng_seed: 0,
        };
        let scene = generate_scene(&spec).unwrap();
        for f in &scene.frames {
            assert!(f.masks.is_empty());
            let bg = BACKGROUND_RGB[0] as f32 / 255.0;
            assert!(f.image.iter().take(1024).all(|&v| (v - bg).abs() < 1e-6));
        }
    }

    #[test]
    fn disappear_interval_sets_visibility() {
        let mut spec = circle_spec(6.0, 8);
        spec.objects[0].disappear = Some((3, 5));
        let scene = generate_scene(&spec).unwrap();
        let vis: Vec<bool> = scene.frames.iter().map(|f| f.visibility[0]).collect();
        assert_eq!(vis, vec![true, true, true, false, false, false, true, true]);
    }

    #[test]
    fn oversized_object_rejected() {
        let spec = circle_spec(40.0, 1);
        assert!(matches!(
            generate_scene(&spec),
            Err(CoreError::ObjectTooLarge { .. })
        ));
    }

    #[test]
    fn occlusion_strictly_reduces_visible_area() {
        let mut spec = circle_spec(10.0, 2);
        spec.objects[0].occlusion = Some((1, 1));
        let scene = generate_scene(&spec).unwrap();
        let a0 = scene.frames[0].masks[0].area();
        let a1 = scene.frames[1].masks[0].area();
        assert!(a1 < a0, "occluded area {a1} not less than {a0}");
    }

    #[test]
    fn depth_order_later_occludes_earlier() {
        let mut spec = circle_spec(8.0, 1);
        spec.objects.push(ObjectSpec {
            shape: ShapeKind::Square,
            color: Color::Blue,
            size_px: 6.0,
            start: (36.0, 32.0),
            velocity: (0.0, 0.0),
            occlusion: None,
            disappear: None,
        });
        let scene = generate_scene(&spec).unwrap();
        let f = &scene.frames[0];
        let (inter, _) = f.masks[0].inter_union(&f.masks[1]);
        assert_eq!(inter, 0, "visible masks must be disjoint");
        // the circle lost pixels to the square
        assert!(f.masks[0].area() < disk_lattice_count_for(32.0, 32.0, 8.0));
    }

    fn disk_lattice_count_for(cx: f64, cy: f64, r: f64) -> usize {
        let mut n = 0;
        for i in 0..64 {
            for j in 0..64 {
                if ((j as f64) - cx).powi(2) + ((i as f64) - cy).powi(2) <= r * r {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn bounce_keeps_object_inside() {
        let mut spec = circle_spec(5.0, 50);
        spec.objects[0].velocity = (7.3, -4.1);
        let scene = generate_scene(&spec).unwrap();
        for f in &scene.frames {
            assert!(f.visibility[0]);
            let b = f.boxes[0].unwrap();
            let (x1, y1, x2, y2) = b.corners();
            assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0);
        }
    }

    #[test]
    fn tight_box_matches_mask_exactly() {
        let scene = generate_scene(&circle_spec(7.0, 1)).unwrap();
        let f = &scene.frames[0];
        let recomputed = f.masks[0].tight_box().unwrap();
        let stored = f.boxes[0].unwrap();
        assert_eq!(recomputed.as_array(), stored.as_array());
    }
}
