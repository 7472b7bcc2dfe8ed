//! Flat-shaded 2-D rasterizer and the seven-axis perturbation suite.
//!
//! Perturbations apply in a fixed order: layout and robot act on the state
//! (applied at reset), then camera shift, light (brightness/contrast),
//! background swap (via the rasterizer's background mask), and per-pixel
//! Gaussian noise act on the frame. The all-off config reproduces the
//! unperturbed render bit-exactly.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::types::Frame;

use super::sim::{chain_points, SimState};
use super::{color_rgb, ObjectKind, ToyEmbodiment, PUSHER_LINKS, REACHER_LINKS};

/// Half-extent of the rendered world window.
const VIEW: f64 = 1.1;
const BG: [u8; 3] = [202, 202, 208];
const BG_SWAP_A: [u8; 3] = [70, 104, 72];
const BG_SWAP_B: [u8; 3] = [58, 88, 60];
const ARM: [u8; 3] = [40, 40, 48];
const EE: [u8; 3] = [245, 245, 250];

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationConfig {
    /// Object position shift in world units (applied at reset).
    pub layout_shift: f64,
    /// Relative link-length jitter (applied at reset).
    pub robot_jitter: f64,
    /// Paraphrase the instruction from the fixed bank (applied at reset).
    pub language_paraphrase: bool,
    /// Viewpoint translation in pixels (clamp-replicated edge fill).
    pub camera_shift_px: i32,
    /// Multiplicative brightness; 1.0 = off.
    pub light_brightness: f64,
    /// Contrast about mid-gray; 1.0 = off.
    pub light_contrast: f64,
    /// Swap the background for a checkered texture.
    pub background_swap: bool,
    /// Per-pixel Gaussian noise sigma in 8-bit units.
    pub noise_sigma: f64,
}

impl PerturbationConfig {
    pub fn off() -> Self {
        Self {
            layout_shift: 0.0,
            robot_jitter: 0.0,
            language_paraphrase: false,
            camera_shift_px: 0,
            light_brightness: 1.0,
            light_contrast: 1.0,
            background_swap: false,
            noise_sigma: 0.0,
        }
    }

    /// Calibrated so the scripted expert keeps >= 90% success.
    pub fn mild() -> Self {
        Self {
            layout_shift: 0.04,
            robot_jitter: 0.03,
            language_paraphrase: true,
            camera_shift_px: 2,
            light_brightness: 1.1,
            light_contrast: 1.1,
            background_swap: false,
            noise_sigma: 4.0,
        }
    }

    pub fn strong() -> Self {
        Self {
            layout_shift: 0.12,
            robot_jitter: 0.08,
            language_paraphrase: true,
            camera_shift_px: 5,
            light_brightness: 1.25,
            light_contrast: 1.3,
            background_swap: true,
            noise_sigma: 12.0,
        }
    }

    pub fn is_off(&self) -> bool {
        self == &Self::off()
    }

    /// Stable short hash for report rows.
    pub fn hash(&self) -> String {
        let repr = format!(
            "{};{};{};{};{};{};{};{}",
            self.layout_shift,
            self.robot_jitter,
            self.language_paraphrase,
            self.camera_shift_px,
            self.light_brightness,
            self.light_contrast,
            self.background_swap,
            self.noise_sigma
        );
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in repr.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self::off()
    }
}

fn to_px(v: f64, res: usize) -> f64 {
    (v + VIEW) / (2.0 * VIEW) * res as f64
}

struct Raster {
    res: usize,
    rgb: Vec<u8>,
    /// true where only background has been drawn
    bg_mask: Vec<bool>,
}

impl Raster {
    fn new(res: usize) -> Self {
        let mut rgb = Vec::with_capacity(res * res * 3);
        for _ in 0..res * res {
            rgb.extend_from_slice(&BG);
        }
        Self {
            res,
            rgb,
            bg_mask: vec![true; res * res],
        }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.res as i64 || y >= self.res as i64 {
            return;
        }
        // world y grows upward, pixel y grows downward
        let row = self.res as i64 - 1 - y;
        let i = (row * self.res as i64 + x) as usize;
        self.rgb[i * 3..i * 3 + 3].copy_from_slice(&c);
        self.bg_mask[i] = false;
    }

    fn fill_square(&mut self, center: [f64; 2], half: f64, c: [u8; 3]) {
        let x0 = to_px(center[0] - half, self.res).floor() as i64;
        let x1 = to_px(center[0] + half, self.res).ceil() as i64;
        let y0 = to_px(center[1] - half, self.res).floor() as i64;
        let y1 = to_px(center[1] + half, self.res).ceil() as i64;
        for y in y0..y1 {
            for x in x0..x1 {
                self.put(x, y, c);
            }
        }
    }

    fn fill_disc(&mut self, center: [f64; 2], radius: f64, c: [u8; 3]) {
        let x0 = to_px(center[0] - radius, self.res).floor() as i64;
        let x1 = to_px(center[0] + radius, self.res).ceil() as i64;
        let y0 = to_px(center[1] - radius, self.res).floor() as i64;
        let y1 = to_px(center[1] + radius, self.res).ceil() as i64;
        let cx = to_px(center[0], self.res);
        let cy = to_px(center[1], self.res);
        let r_px = radius / (2.0 * VIEW) * self.res as f64;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r_px * r_px {
                    self.put(x, y, c);
                }
            }
        }
    }

    fn line(&mut self, a: [f64; 2], b: [f64; 2], width: f64, c: [u8; 3]) {
        let (ax, ay) = (to_px(a[0], self.res), to_px(a[1], self.res));
        let (bx, by) = (to_px(b[0], self.res), to_px(b[1], self.res));
        let w_px = (width / (2.0 * VIEW) * self.res as f64).max(0.7);
        let x0 = (ax.min(bx) - w_px).floor() as i64;
        let x1 = (ax.max(bx) + w_px).ceil() as i64;
        let y0 = (ay.min(by) - w_px).floor() as i64;
        let y1 = (ay.max(by) + w_px).ceil() as i64;
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        for y in y0..y1 {
            for x in x0..x1 {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                let t = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
                let qx = ax + t * dx;
                let qy = ay + t * dy;
                let d2 = (px - qx).powi(2) + (py - qy).powi(2);
                if d2 <= w_px * w_px {
                    self.put(x, y, c);
                }
            }
        }
    }
}

/// Renders the state; deterministic given `(state, perturb, seed)`.
pub fn render(state: &SimState, perturb: &PerturbationConfig, seed: u64) -> Frame {
    let res = state.resolution;
    let mut r = Raster::new(res);

    // zones first (large, outlined-by-fill), then blocks/targets
    for (i, o) in state.task.scene.objects.iter().enumerate() {
        if o.kind == ObjectKind::Zone {
            r.fill_square(state.obj_pos[i], o.size, color_rgb(&o.color));
        }
    }
    for (i, o) in state.task.scene.objects.iter().enumerate() {
        match o.kind {
            ObjectKind::Zone => {}
            ObjectKind::Block => r.fill_square(state.obj_pos[i], o.size, color_rgb(&o.color)),
            ObjectKind::Target => r.fill_disc(state.obj_pos[i], o.size, color_rgb(&o.color)),
        }
    }

    // arm(s)
    let draw_chain = |r: &mut Raster, pts: &[[f64; 2]]| {
        for w in pts.windows(2) {
            r.line(w[0], w[1], 0.035, ARM);
        }
    };
    match state.task.embodiment {
        ToyEmbodiment::Reacher2 => {
            let pts = chain_points(&state.q, &REACHER_LINKS, state.link_scale);
            draw_chain(&mut r, &pts);
            r.fill_disc(*pts.last().unwrap(), 0.035, EE);
        }
        ToyEmbodiment::Pusher3 => {
            let pts = chain_points(&state.q, &PUSHER_LINKS, state.link_scale);
            draw_chain(&mut r, &pts);
            r.fill_disc(*pts.last().unwrap(), 0.035, EE);
        }
        ToyEmbodiment::Gripper4 => {
            let ee = [state.q[0], state.q[1]];
            r.fill_square(ee, 0.05, ARM);
            let marker = if state.q[3] >= 0.5 { [230, 80, 80] } else { EE };
            r.fill_disc(ee, 0.025, marker);
        }
        ToyEmbodiment::DualArm8 => {
            for (base, off) in [([-0.95, -0.95], 0), ([0.95, -0.95], 4)] {
                let ee = [state.q[off], state.q[off + 1]];
                r.line(base, ee, 0.02, ARM);
                r.fill_square(ee, 0.045, ARM);
                let marker = if state.q[off + 3] >= 0.5 {
                    [230, 80, 80]
                } else {
                    EE
                };
                r.fill_disc(ee, 0.02, marker);
            }
        }
    }

    let mut rgb = r.rgb;
    let mut bg_mask = r.bg_mask;

    // camera: translate with clamp-replicated edge fill
    if perturb.camera_shift_px != 0 {
        let s = perturb.camera_shift_px as i64;
        let (new_rgb, new_mask) = shift_frame(&rgb, &bg_mask, res, s, s);
        rgb = new_rgb;
        bg_mask = new_mask;
    }

    // light: contrast about mid-gray, then brightness, clipped
    if perturb.light_brightness != 1.0 || perturb.light_contrast != 1.0 {
        for v in &mut rgb {
            let x = ((*v as f64 - 128.0) * perturb.light_contrast + 128.0)
                * perturb.light_brightness;
            *v = x.round().clamp(0.0, 255.0) as u8;
        }
    }

    // background: checkered texture swap on the background mask
    if perturb.background_swap {
        for i in 0..res * res {
            if bg_mask[i] {
                let (y, x) = (i / res, i % res);
                let c = if (x / 4 + y / 4) % 2 == 0 {
                    BG_SWAP_A
                } else {
                    BG_SWAP_B
                };
                rgb[i * 3..i * 3 + 3].copy_from_slice(&c);
            }
        }
    }

    // noise: seeded per-pixel Gaussian in 8-bit units
    if perturb.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e01_5e00);
        for v in &mut rgb {
            let n: f64 = rng.sample::<f64, _>(StandardNormal) * perturb.noise_sigma;
            *v = (*v as f64 + n).round().clamp(0.0, 255.0) as u8;
        }
    }

    Frame::new(res, rgb)
}

/// Translates a frame by (dx, dy) pixels with clamp-replicated edges.
fn shift_frame(rgb: &[u8], mask: &[bool], res: usize, dx: i64, dy: i64) -> (Vec<u8>, Vec<bool>) {
    let mut out = vec![0u8; rgb.len()];
    let mut out_mask = vec![false; mask.len()];
    for y in 0..res as i64 {
        for x in 0..res as i64 {
            let sx = (x - dx).clamp(0, res as i64 - 1);
            let sy = (y - dy).clamp(0, res as i64 - 1);
            let d = (y * res as i64 + x) as usize;
            let s = (sy * res as i64 + sx) as usize;
            out[d * 3..d * 3 + 3].copy_from_slice(&rgb[s * 3..s * 3 + 3]);
            out_mask[d] = mask[s];
        }
    }
    (out, out_mask)
}
