//! Façade layout sampling and rasterisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SegmentationSample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

pub const WALL: u8 = 1;
pub const BEAM: u8 = 2;
pub const COLUMN: u8 = 3;
pub const WINDOW_FRAME: u8 = 4;
pub const WINDOW_PANE: u8 = 5;
pub const DOOR: u8 = 6;
pub const SLAB: u8 = 7;

/// Base RGB per component class, background first.
const PALETTE: [[f32; 3]; 8] = [
    [0.55, 0.75, 0.95],
    [0.82, 0.72, 0.56],
    [0.52, 0.54, 0.60],
    [0.38, 0.33, 0.30],
    [0.96, 0.96, 0.94],
    [0.16, 0.27, 0.45],
    [0.55, 0.26, 0.10],
    [0.66, 0.68, 0.46],
];
const CRACK_RGB: [f32; 3] = [0.06, 0.05, 0.05];
const SPALL_RGB: [f32; 3] = [0.60, 0.58, 0.56];
const REBAR_RGB: [f32; 3] = [0.78, 0.36, 0.12];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub class: u8,
    pub rect: Rect,
    /// Severity level 0 (undamaged) to 3 (severe).
    pub state: u8,
}

/// Damage primitives; each is painted only over the visible pixels of its
/// component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Damage {
    Crack {
        component: usize,
        points: Vec<(f32, f32)>,
        width: u8,
    },
    Spall {
        component: usize,
        cx: f32,
        cy: f32,
        rx: f32,
        ry: f32,
        lobes: u8,
        phase: f32,
    },
    /// A bar through the spall primitive `spall`, visible only inside it.
    Rebar {
        spall: usize,
        horizontal: bool,
        offset: f32,
        width: u8,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    /// Half-width of uniform per-pixel noise.
    pub noise: f32,
    /// Per-scene shift of each class colour.
    pub color_jitter: f32,
    /// Inclusive crack width range in pixels.
    pub crack_width: (u8, u8),
    pub damage: bool,
    pub window_prob: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams { noise: 0.04, color_jitter: 0.04, crack_width: (1, 3), damage: true, window_prob: 0.75 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Painted in order; later components occlude earlier ones.
    pub components: Vec<Component>,
    pub damages: Vec<Damage>,
    pub noise: f32,
    pub color_jitter: f32,
    pub seed: u64,
}

fn structural(class: u8) -> bool {
    matches!(class, WALL | BEAM | COLUMN | SLAB)
}

fn range(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Index of the topmost component at each pixel, `None` for background.
fn owners(w: usize, h: usize, comps: &[Component]) -> Vec<Option<u16>> {
    let mut own = vec![None; w * h];
    for (i, c) in comps.iter().enumerate() {
        for y in c.rect.y..c.rect.y + c.rect.h {
            own[y * w + c.rect.x..y * w + c.rect.x + c.rect.w].fill(Some(i as u16));
        }
    }
    own
}

impl SceneSpec {
    /// Samples a façade: a wall with columns, floor beams and a slab, and
    /// windows or a door in the bays.
    pub fn random(width: usize, height: usize, seed: u64, p: &SceneParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (width, height);
        let mut comps = Vec::new();
        let mx0 = range(&mut rng, 0, w / 10);
        let mx1 = range(&mut rng, 0, w / 10);
        let my0 = range(&mut rng, h / 20, h / 6);
        let my1 = range(&mut rng, 0, h / 20);
        let facade = Rect { x: mx0, y: my0, w: w - mx0 - mx1, h: h - my0 - my1 };
        comps.push(Component { class: WALL, rect: facade, state: 0 });

        let n_cols = range(&mut rng, 3, 4);
        let cw = range(&mut rng, (w / 40).max(3), (w / 25).max(4)).min(facade.w / (2 * n_cols)).max(1);
        let col_x: Vec<usize> = (0..n_cols)
            .map(|k| {
                let base = facade.x + k * (facade.w - cw) / (n_cols - 1);
                let j = (w / 60) as i64;
                let jit = if k == 0 || k + 1 == n_cols || j == 0 { 0 } else { rng.gen_range(-j..=j) };
                (base as i64 + jit).clamp(facade.x as i64, (facade.x + facade.w - cw) as i64) as usize
            })
            .collect();
        let n_floors = range(&mut rng, 2, 3);
        let bh = range(&mut rng, (h / 45).max(2), (h / 28).max(3)).max(1);
        let sh = range(&mut rng, (h / 40).max(2), (h / 25).max(3)).max(1);
        let slab_y = facade.y + facade.h - sh;
        let beam_y: Vec<usize> = (0..n_floors).map(|k| facade.y + k * (slab_y - facade.y) / n_floors).collect();

        let door_bay = range(&mut rng, 0, n_cols - 2);
        for f in 0..n_floors {
            let y0 = beam_y[f] + bh;
            let y1 = if f + 1 < n_floors { beam_y[f + 1] } else { slab_y };
            for b in 0..n_cols - 1 {
                let x0 = col_x[b] + cw;
                let x1 = col_x[b + 1];
                if x1 <= x0 + 8 || y1 <= y0 + 8 {
                    continue;
                }
                let (bw, bhh) = (x1 - x0, y1 - y0);
                let ft = range(&mut rng, (w / 90).max(2), (w / 55).max(3));
                if f + 1 == n_floors && b == door_bay {
                    let dw = range(&mut rng, bw * 30 / 100, bw * 45 / 100).max(2 * ft + 2);
                    let dh = range(&mut rng, bhh * 65 / 100, bhh * 85 / 100).max(2 * ft + 2).min(bhh);
                    let dx = x0 + range(&mut rng, 0, bw.saturating_sub(dw));
                    comps.push(Component { class: DOOR, rect: Rect { x: dx, y: y1 - dh, w: dw.min(bw), h: dh }, state: 0 });
                } else if rng.gen_bool(p.window_prob) {
                    let ww = range(&mut rng, bw * 40 / 100, bw * 65 / 100).max(2 * ft + 2).min(bw);
                    let wh = range(&mut rng, bhh * 35 / 100, bhh * 60 / 100).max(2 * ft + 2).min(bhh);
                    let wx = x0 + range(&mut rng, (bw - ww) / 4, 3 * (bw - ww) / 4);
                    let wy = y0 + range(&mut rng, (bhh - wh) / 4, 3 * (bhh - wh) / 4);
                    comps.push(Component { class: WINDOW_FRAME, rect: Rect { x: wx, y: wy, w: ww, h: wh }, state: 0 });
                    comps.push(Component {
                        class: WINDOW_PANE,
                        rect: Rect { x: wx + ft, y: wy + ft, w: ww - 2 * ft, h: wh - 2 * ft },
                        state: 0,
                    });
                }
            }
        }
        for &x in &col_x {
            comps.push(Component { class: COLUMN, rect: Rect { x, y: facade.y, w: cw, h: facade.h }, state: 0 });
        }
        for &y in &beam_y {
            comps.push(Component { class: BEAM, rect: Rect { x: facade.x, y, w: facade.w, h: bh }, state: 0 });
        }
        comps.push(Component { class: SLAB, rect: Rect { x: facade.x, y: slab_y, w: facade.w, h: sh }, state: 0 });

        for c in comps.iter_mut() {
            let u: f64 = rng.gen();
            c.state = if structural(c.class) {
                match u {
                    u if u < 0.3 => 0,
                    u if u < 0.6 => 1,
                    u if u < 0.82 => 2,
                    _ => 3,
                }
            } else {
                u8::from(u > 0.8)
            };
        }

        let mut damages = Vec::new();
        if p.damage {
            let own = owners(w, h, &comps);
            for (i, c) in comps.iter().enumerate() {
                if !structural(c.class) || c.state == 0 {
                    continue;
                }
                let big = c.class == WALL;
                let n_cracks = match (c.state, big) {
                    (1, true) => range(&mut rng, 1, 2),
                    (2, true) => range(&mut rng, 2, 3),
                    (3, true) => range(&mut rng, 3, 4),
                    (1, false) => 1,
                    (2, false) => range(&mut rng, 1, 2),
                    _ => 2,
                };
                for _ in 0..n_cracks {
                    if let Some(d) = sample_crack(&mut rng, i, c, &own, w, h, p) {
                        damages.push(d);
                    }
                }
                let n_spall = match c.state {
                    2 => usize::from(rng.gen_bool(0.5)),
                    3 => range(&mut rng, 1, 2),
                    _ => 0,
                };
                for _ in 0..n_spall {
                    let Some(start) = owned_point(&mut rng, i, c, &own, w) else { continue };
                    let scale = (w.min(h) as f32).max(16.0);
                    let rmax = (c.rect.w.min(c.rect.h) as f32 * 0.8).max(3.0);
                    let rx = rng.gen_range(scale / 40.0..scale / 18.0).min(rmax);
                    let ry = rng.gen_range(scale / 40.0..scale / 18.0).min(rmax);
                    damages.push(Damage::Spall {
                        component: i,
                        cx: start.0,
                        cy: start.1,
                        rx,
                        ry,
                        lobes: rng.gen_range(2..=5),
                        phase: rng.gen_range(0.0..std::f32::consts::TAU),
                    });
                    let spall = damages.len() - 1;
                    let rebar_prob = if c.state == 3 { 1.0 } else { 0.3 };
                    if rng.gen_bool(rebar_prob) {
                        let horizontal = match c.class {
                            BEAM | SLAB => true,
                            COLUMN => false,
                            _ => rng.gen_bool(0.5),
                        };
                        for _ in 0..range(&mut rng, 1, 2) {
                            damages.push(Damage::Rebar {
                                spall,
                                horizontal,
                                offset: rng.gen_range(-0.5..0.5),
                                width: rng.gen_range(2..=3),
                            });
                        }
                    }
                }
            }
        }
        SceneSpec {
            width,
            height,
            components: comps,
            damages,
            noise: p.noise,
            color_jitter: p.color_jitter,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.width == 0 || self.height == 0 {
            return bad("empty canvas".into());
        }
        for (i, c) in self.components.iter().enumerate() {
            let r = c.rect;
            if r.x + r.w > self.width || r.y + r.h > self.height {
                return bad(format!("component {i} {r:?} outside {}x{} canvas", self.width, self.height));
            }
            if c.class == 0 || c.class as usize >= super::COMPONENT_CLASSES.len() || c.state > 3 {
                return bad(format!("component {i} has invalid class {} or state {}", c.class, c.state));
            }
        }
        let inside = |x: f32, y: f32| x >= 0.0 && y >= 0.0 && x < self.width as f32 && y < self.height as f32;
        for (i, d) in self.damages.iter().enumerate() {
            match d {
                Damage::Crack { component, points, width } => {
                    if *component >= self.components.len() || *width == 0 {
                        return bad(format!("crack {i} refers to a missing component"));
                    }
                    if points.len() < 2 || !points.iter().all(|&(x, y)| inside(x, y)) {
                        return bad(format!("crack {i} outside canvas"));
                    }
                }
                Damage::Spall { component, cx, cy, rx, ry, .. } => {
                    if *component >= self.components.len() || !inside(*cx, *cy) || *rx <= 0.0 || *ry <= 0.0 {
                        return bad(format!("spall {i} outside canvas"));
                    }
                }
                Damage::Rebar { spall, width, .. } => {
                    if !matches!(self.damages.get(*spall), Some(Damage::Spall { .. })) || *width == 0 {
                        return bad(format!("rebar {i} must refer to a spall primitive"));
                    }
                }
            }
        }
        Ok(())
    }
}

fn owned_point(rng: &mut ChaCha8Rng, i: usize, c: &Component, own: &[Option<u16>], w: usize) -> Option<(f32, f32)> {
    for _ in 0..32 {
        let x = c.rect.x + rng.gen_range(0..c.rect.w);
        let y = c.rect.y + rng.gen_range(0..c.rect.h);
        if own[y * w + x] == Some(i as u16) {
            return Some((x as f32 + 0.5, y as f32 + 0.5));
        }
    }
    None
}

fn sample_crack(
    rng: &mut ChaCha8Rng,
    i: usize,
    c: &Component,
    own: &[Option<u16>],
    w: usize,
    h: usize,
    p: &SceneParams,
) -> Option<Damage> {
    let mut pt = owned_point(rng, i, c, own, w)?;
    let scale = w.min(h) as f32;
    use std::f32::consts::{FRAC_PI_2, PI, TAU};
    let flip = if rng.gen_bool(0.5) { PI } else { 0.0 };
    let mut angle: f32 = match c.class {
        BEAM | SLAB => flip + rng.gen_range(-0.4..0.4),
        COLUMN => FRAC_PI_2 + flip + rng.gen_range(-0.4..0.4),
        _ => rng.gen_range(0.0..TAU),
    };
    let mut points = vec![pt];
    let drift = if c.class == WALL { 0.5 } else { 0.25 };
    'walk: for _ in 0..rng.gen_range(6..=14) {
        // A step that would leave the component is retried with a new heading.
        for attempt in 0..4 {
            let turn = if attempt == 0 { 0.0 } else { PI * rng.gen_range(0.3..1.0) };
            let a = angle + turn + rng.gen_range(-drift..drift);
            let len = rng.gen_range(scale / 45.0..scale / 20.0).max(2.0);
            let next = (pt.0 + len * a.cos(), pt.1 + len * a.sin());
            if next.0 >= 0.0 && next.1 >= 0.0 && c.rect.contains(next.0 as usize, next.1 as usize) {
                angle = a;
                pt = next;
                points.push(pt);
                continue 'walk;
            }
        }
        break;
    }
    if points.len() < 2 {
        return None;
    }
    let (lo, hi) = p.crack_width;
    Some(Damage::Crack { component: i, points, width: rng.gen_range(lo.max(1)..=hi.max(lo).max(1)) })
}

fn seg_dist(px: f32, py: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let l2 = dx * dx + dy * dy;
    let t = if l2 == 0.0 { 0.0 } else { (((px - a.0) * dx + (py - a.1) * dy) / l2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    (qx * qx + qy * qy).sqrt()
}

fn spall_contains(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32, lobes: u8, phase: f32) -> bool {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    let r = 1.0 + 0.3 * (lobes as f32 * dy.atan2(dx) + phase).sin();
    dx * dx + dy * dy <= r * r
}

/// Renders a scene. Deterministic in the scene description; image values are
/// quantised to multiples of 1/255 so a PPM round trip is exact.
pub fn generate(spec: &SceneSpec) -> Result<SegmentationSample> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let own = owners(w, h, &spec.components);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut palette = PALETTE;
    for col in palette.iter_mut() {
        for v in col.iter_mut() {
            if spec.color_jitter > 0.0 {
                *v += rng.gen_range(-spec.color_jitter..spec.color_jitter);
            }
        }
    }
    let mut component = Mask::zeros(1, h, w);
    let mut damage = Mask::zeros(1, h, w);
    let mut rgb = vec![[0f32; 3]; w * h];
    for (px, o) in own.iter().enumerate() {
        let class = o.map_or(0, |i| spec.components[i as usize].class);
        component.data[px] = class;
        damage.data[px] = o.map_or(0, |i| spec.components[i as usize].state + 1);
        rgb[px] = palette[class as usize];
    }
    let mut crack = Mask::zeros(1, h, w);
    let mut rebar = Mask::zeros(1, h, w);
    let mut spall = Mask::zeros(1, h, w);
    let owned_by = |px: usize, comp: usize| own[px] == Some(comp as u16);

    for d in &spec.damages {
        if let Damage::Spall { component: ci, cx, cy, rx, ry, lobes, phase } = *d {
            let r = rx.max(ry) * 1.3 + 1.0;
            let (x0, x1) = (((cx - r).max(0.0)) as usize, ((cx + r) as usize).min(w - 1));
            let (y0, y1) = (((cy - r).max(0.0)) as usize, ((cy + r) as usize).min(h - 1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let px = y * w + x;
                    if owned_by(px, ci) && spall_contains(x as f32 + 0.5, y as f32 + 0.5, cx, cy, rx, ry, lobes, phase) {
                        spall.data[px] = 1;
                    }
                }
            }
        }
    }
    for d in &spec.damages {
        if let Damage::Rebar { spall: si, horizontal, offset, width } = *d {
            let Damage::Spall { component: ci, cx, cy, rx, ry, lobes, phase } = spec.damages[si] else { unreachable!() };
            let r = rx.max(ry) * 1.3 + 1.0;
            let line = if horizontal { cy + offset * ry } else { cx + offset * rx };
            let (x0, x1) = (((cx - r).max(0.0)) as usize, ((cx + r) as usize).min(w - 1));
            let (y0, y1) = (((cy - r).max(0.0)) as usize, ((cy + r) as usize).min(h - 1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                    let along = if horizontal { fy } else { fx };
                    let px = y * w + x;
                    if (along - line).abs() <= width as f32 / 2.0
                        && owned_by(px, ci)
                        && spall_contains(fx, fy, cx, cy, rx, ry, lobes, phase)
                    {
                        rebar.data[px] = 1;
                    }
                }
            }
        }
    }
    for d in &spec.damages {
        if let Damage::Crack { component: ci, ref points, width } = *d {
            let half = width as f32 / 2.0;
            for seg in points.windows(2) {
                let (a, b) = (seg[0], seg[1]);
                let x0 = (a.0.min(b.0) - half - 1.0).max(0.0) as usize;
                let x1 = ((a.0.max(b.0) + half + 1.0) as usize).min(w - 1);
                let y0 = (a.1.min(b.1) - half - 1.0).max(0.0) as usize;
                let y1 = ((a.1.max(b.1) + half + 1.0) as usize).min(h - 1);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let px = y * w + x;
                        if owned_by(px, ci) && seg_dist(x as f32 + 0.5, y as f32 + 0.5, a, b) <= half {
                            crack.data[px] = 1;
                        }
                    }
                }
            }
        }
    }

    let mut image = Tensor::<f32>::zeros([1, 3, h, w]);
    let plane = w * h;
    let data = image.data_mut();
    for px in 0..plane {
        let mut c = rgb[px];
        if spall.data[px] == 1 {
            let s = 1.0 + rng.gen_range(-0.15..0.15);
            c = SPALL_RGB.map(|v| v * s);
        }
        if rebar.data[px] == 1 {
            c = REBAR_RGB;
        }
        if crack.data[px] == 1 {
            c = CRACK_RGB;
        }
        for (ch, &v) in c.iter().enumerate() {
            let n = if spec.noise > 0.0 { rng.gen_range(-spec.noise..spec.noise) } else { 0.0 };
            data[ch * plane + px] = ((v + n).clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    Ok(SegmentationSample { image, component, damage, crack, rebar, spall })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_is_bit_identical() {
        let p = SceneParams::default();
        let a = generate(&SceneSpec::random(96, 80, 5, &p)).unwrap();
        let b = generate(&SceneSpec::random(96, 80, 5, &p)).unwrap();
        assert_eq!(a, b);
        let c = generate(&SceneSpec::random(96, 80, 6, &p)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn no_damage_means_empty_damage_masks() {
        let p = SceneParams { damage: false, ..Default::default() };
        let s = generate(&SceneSpec::random(128, 128, 2, &p)).unwrap();
        for m in [&s.crack, &s.rebar, &s.spall] {
            assert!(m.data.iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn out_of_canvas_primitives_rejected() {
        let mut spec = SceneSpec::random(64, 64, 1, &SceneParams::default());
        spec.components[0].rect.w = 100;
        assert!(generate(&spec).is_err());
        let mut spec = SceneSpec::random(64, 64, 1, &SceneParams::default());
        spec.damages.push(Damage::Crack { component: 0, points: vec![(1.0, 1.0), (70.0, 3.0)], width: 1 });
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn classes_and_states_are_in_range_and_all_classes_occur() {
        let p = SceneParams::default();
        let mut seen = [false; 8];
        for seed in 0..20 {
            let s = generate(&SceneSpec::random(448, 448, seed, &p)).unwrap();
            for &c in &s.component.data {
                seen[c as usize] = true;
            }
            assert!(s.damage.data.iter().all(|&d| d <= 4));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(seen.iter().all(|&b| b), "{seen:?}");
    }

    #[test]
    fn damage_state_is_constant_per_component() {
        for seed in 0..20 {
            let spec = SceneSpec::random(160, 120, seed, &SceneParams::default());
            let s = generate(&spec).unwrap();
            let own = owners(160, 120, &spec.components);
            for (px, o) in own.iter().enumerate() {
                let expect = o.map_or(0, |i| spec.components[i as usize].state + 1);
                assert_eq!(s.damage.data[px], expect);
            }
        }
    }

    #[test]
    fn large_scenes_contain_thin_cracks() {
        let mut total = 0;
        for seed in 0..8 {
            let s = generate(&SceneSpec::random(448, 448, seed, &SceneParams::default())).unwrap();
            total += s.crack.data.iter().map(|&v| v as usize).sum::<usize>();
        }
        assert!(total > 500, "{total}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            #[test]
            fn damage_pixels_lie_on_components(seed in any::<u64>()) {
                let s = generate(&SceneSpec::random(128, 112, seed, &SceneParams::default())).unwrap();
                for px in 0..s.component.data.len() {
                    if s.crack.data[px] + s.rebar.data[px] + s.spall.data[px] > 0 {
                        prop_assert!(s.component.data[px] != 0);
                    }
                    if s.rebar.data[px] == 1 {
                        prop_assert_eq!(s.spall.data[px], 1);
                    }
                }
            }
        }
    }
}
