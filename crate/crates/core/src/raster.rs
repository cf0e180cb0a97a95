//! Ego-centric, ego-rotated birdview rendering.
//!
//! The ego center sits at image coordinate `(W/2, H/2)` with its heading
//! pointing up (towards row 0). Coordinates are `(column, row)` with rows
//! growing downwards; a pixel `(c, r)` is sampled at its center
//! `(c + 0.5, r + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obb::obb_corners;
use crate::scene::{AgentGeometry, AgentState, LightPhase, MapMesh};

/// Layer colors. Bump [`PALETTE_VERSION`] whenever one changes.
pub mod palette {
    pub const BACKGROUND: [u8; 3] = [0, 0, 0];
    pub const DRIVABLE: [u8; 3] = [96, 96, 96];
    pub const LIGHT_GREEN: [u8; 3] = [0, 200, 0];
    pub const LIGHT_YELLOW: [u8; 3] = [230, 200, 0];
    pub const LIGHT_RED: [u8; 3] = [230, 0, 0];
    pub const OTHER_AGENT: [u8; 3] = [60, 120, 255];
    pub const EGO: [u8; 3] = [255, 255, 255];
    /// Reserved for the active waypoint; no other layer uses it.
    pub const WAYPOINT: [u8; 3] = [150, 75, 0];
}

pub const PALETTE_VERSION: u32 = 1;

/// Half thickness of rendered stop lines, meters.
const STOP_LINE_HALF_WIDTH: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub size: usize,
    pub meters_per_pixel: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            size: 64,
            meters_per_pixel: 0.5,
        }
    }
}

impl RasterConfig {
    pub fn extent(&self) -> f64 {
        self.size as f64 * self.meters_per_pixel
    }

    /// Distance from the ego center to a frame corner, meters.
    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.extent() * std::f64::consts::SQRT_2
    }
}

/// Fixed-size H×W×3 RGB observation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BirdviewRaster {
    size: usize,
    pixels: Vec<u8>,
}

impl BirdviewRaster {
    fn new(size: usize) -> Self {
        let mut pixels = vec![0u8; size * size * 3];
        for px in pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&palette::BACKGROUND);
        }
        Self { size, pixels }
    }

    /// Wraps row-major RGB bytes of a `size`×`size` image.
    pub fn from_pixels(size: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != size * size * 3 {
            return Err(Error::Shape(format!("{size}x{size} raster needs {} bytes, got {}", size * size * 3, pixels.len())));
        }
        Ok(Self { size, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major RGB bytes.
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, col: usize, row: usize) -> [u8; 3] {
        let i = (row * self.size + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn count_color(&self, color: [u8; 3]) -> usize {
        self.pixels.chunks_exact(3).filter(|p| *p == color).count()
    }

    /// Channel-major floats in [0, 1], the layout the encoder consumes.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.size * self.size;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] as f64 / 255.0;
            }
        }
        out
    }

    fn paint(&mut self, col: usize, row: usize, color: [u8; 3]) {
        let i = (row * self.size + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&color);
    }
}

/// Maps a world point into fractional `(column, row)` raster coordinates.
pub fn world_to_raster(cfg: &RasterConfig, ego: &AgentState, point: [f64; 2]) -> [f64; 2] {
    let dx = point[0] - ego.x;
    let dy = point[1] - ego.y;
    // Rotate by −(ψ − π/2): heading goes to +y, then flip y for image rows.
    let (s, c) = ego.psi.sin_cos();
    let forward = c * dx + s * dy;
    let left = -s * dx + c * dy;
    let half = cfg.size as f64 / 2.0;
    [half - left / cfg.meters_per_pixel, half - forward / cfg.meters_per_pixel]
}

/// Everything in the scene a render needs, borrowed.
#[derive(Debug, Clone, Copy)]
pub struct SceneView<'a> {
    pub states: &'a [AgentState],
    pub present: &'a [bool],
    pub geometries: &'a [AgentGeometry],
    pub map: &'a MapMesh,
    pub light_phases: &'a [LightPhase],
}

fn fill_convex(img: &mut BirdviewRaster, poly: &[[f64; 2]], color: [u8; 3]) {
    let size = img.size as f64;
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in poly {
        lo_x = lo_x.min(p[0]);
        hi_x = hi_x.max(p[0]);
        lo_y = lo_y.min(p[1]);
        hi_y = hi_y.max(p[1]);
    }
    if hi_x < 0.0 || hi_y < 0.0 || lo_x > size || lo_y > size {
        return;
    }
    let c0 = (lo_x - 0.5).ceil().max(0.0) as usize;
    let c1 = ((hi_x - 0.5).floor().min(size - 1.0)).max(-1.0);
    let r0 = (lo_y - 0.5).ceil().max(0.0) as usize;
    let r1 = ((hi_y - 0.5).floor().min(size - 1.0)).max(-1.0);
    if c1 < 0.0 || r1 < 0.0 {
        return;
    }
    let (c1, r1) = (c1 as usize, r1 as usize);
    let n = poly.len();
    for r in r0..=r1 {
        let py = r as f64 + 0.5;
        for c in c0..=c1 {
            let px = c as f64 + 0.5;
            let mut pos = false;
            let mut neg = false;
            for i in 0..n {
                let a = poly[i];
                let b = poly[(i + 1) % n];
                let cr = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
                pos |= cr > 0.0;
                neg |= cr < 0.0;
            }
            if !(pos && neg) {
                img.paint(c, r, color);
            }
        }
    }
}

fn fill_disk(img: &mut BirdviewRaster, center: [f64; 2], radius_px: f64, color: [u8; 3]) {
    let size = img.size as f64;
    let c0 = (center[0] - radius_px - 0.5).ceil().max(0.0);
    let c1 = (center[0] + radius_px - 0.5).floor().min(size - 1.0);
    let r0 = (center[1] - radius_px - 0.5).ceil().max(0.0);
    let r1 = (center[1] + radius_px - 0.5).floor().min(size - 1.0);
    if c1 < c0 || r1 < r0 {
        return;
    }
    let r2 = radius_px * radius_px;
    for r in r0 as usize..=r1 as usize {
        for c in c0 as usize..=c1 as usize {
            let dx = c as f64 + 0.5 - center[0];
            let dy = r as f64 + 0.5 - center[1];
            if dx * dx + dy * dy <= r2 {
                img.paint(c, r, color);
            }
        }
    }
}

fn light_color(phase: LightPhase) -> [u8; 3] {
    match phase {
        LightPhase::Green => palette::LIGHT_GREEN,
        LightPhase::Yellow => palette::LIGHT_YELLOW,
        LightPhase::Red => palette::LIGHT_RED,
    }
}

/// Renders the birdview of agent `ego`. The waypoint, when given, is drawn
/// last as a disk of `waypoint_radius` meters.
pub fn render(
    cfg: &RasterConfig,
    scene: &SceneView<'_>,
    ego: usize,
    waypoint: Option<[f64; 2]>,
    waypoint_radius: f64,
) -> BirdviewRaster {
    let mut img = BirdviewRaster::new(cfg.size);
    let ego_state = scene.states[ego];
    let view = cfg.half_diagonal();
    let to_px = |p: [f64; 2]| world_to_raster(cfg, &ego_state, p);
    let near = |x: f64, y: f64, pad: f64| (x - ego_state.x).abs() <= view + pad && (y - ego_state.y).abs() <= view + pad;

    for t in &scene.map.triangles {
        let (lx, hx) = (t[0].min(t[2]).min(t[4]), t[0].max(t[2]).max(t[4]));
        let (ly, hy) = (t[1].min(t[3]).min(t[5]), t[1].max(t[3]).max(t[5]));
        if hx < ego_state.x - view || lx > ego_state.x + view || hy < ego_state.y - view || ly > ego_state.y + view {
            continue;
        }
        let poly = [to_px([t[0], t[1]]), to_px([t[2], t[3]]), to_px([t[4], t[5]])];
        fill_convex(&mut img, &poly, palette::DRIVABLE);
    }

    for (light, phase) in scene.map.traffic_lights.iter().zip(scene.light_phases) {
        let [a, b] = light.stop_line;
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = dx.hypot(dy);
        if len == 0.0 || !near(0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * len) {
            continue;
        }
        let (nx, ny) = (-dy / len * STOP_LINE_HALF_WIDTH, dx / len * STOP_LINE_HALF_WIDTH);
        let poly = [
            to_px([a[0] + nx, a[1] + ny]),
            to_px([b[0] + nx, b[1] + ny]),
            to_px([b[0] - nx, b[1] - ny]),
            to_px([a[0] - nx, a[1] - ny]),
        ];
        fill_convex(&mut img, &poly, light_color(*phase));
    }

    for (i, (s, g)) in scene.states.iter().zip(scene.geometries).enumerate() {
        if i == ego || !scene.present[i] {
            continue;
        }
        let pad = 0.5 * g.length.hypot(g.width);
        if !near(s.x, s.y, pad) {
            continue;
        }
        let poly = obb_corners(s, g).map(to_px);
        fill_convex(&mut img, &poly, palette::OTHER_AGENT);
    }

    let poly = obb_corners(&ego_state, &scene.geometries[ego]).map(to_px);
    fill_convex(&mut img, &poly, palette::EGO);

    if let Some(w) = waypoint {
        if near(w[0], w[1], waypoint_radius) {
            fill_disk(&mut img, to_px(w), waypoint_radius / cfg.meters_per_pixel, palette::WAYPOINT);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::scene::{LightCycle, TrafficLight};

    fn cfg() -> RasterConfig {
        RasterConfig::default()
    }

    #[test]
    fn ego_maps_to_center() {
        let ego = AgentState::new(3.0, -7.0, 1.1, 4.0);
        assert_eq!(world_to_raster(&cfg(), &ego, [3.0, -7.0]), [32.0, 32.0]);
    }

    #[test]
    fn ahead_maps_up() {
        let ego = AgentState::new(0.0, 0.0, 0.0, 0.0);
        let p = world_to_raster(&cfg(), &ego, [10.0, 0.0]);
        assert!((p[0] - 32.0).abs() < 1e-12 && (p[1] - 12.0).abs() < 1e-12);
        // Left of the ego lands left in the image.
        let p = world_to_raster(&cfg(), &ego, [0.0, 4.0]);
        assert!((p[0] - 24.0).abs() < 1e-12 && (p[1] - 32.0).abs() < 1e-12);
    }

    #[test]
    fn matches_affine_matrix_oracle() {
        let ego = AgentState::new(3.0, 4.0, 0.7, 0.0);
        // 2x3 composition: flip-and-scale · rotate(π/2 − ψ) · translate(−ego), then center.
        let rot = PI / 2.0 - ego.psi;
        let k = 1.0 / 0.5;
        let a = [[k * rot.cos(), -k * rot.sin()], [-k * rot.sin(), -k * rot.cos()]];
        let m = [
            [a[0][0], a[0][1], 32.0 - a[0][0] * ego.x - a[0][1] * ego.y],
            [a[1][0], a[1][1], 32.0 - a[1][0] * ego.x - a[1][1] * ego.y],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)];
            let want = [
                m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
                m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
            ];
            let got = world_to_raster(&cfg(), &ego, p);
            assert!((got[0] - want[0]).abs() < 1e-9 && (got[1] - want[1]).abs() < 1e-9, "{got:?} {want:?}");
        }
    }

    fn single_ego_scene() -> (Vec<AgentState>, Vec<bool>, Vec<AgentGeometry>, MapMesh) {
        (
            vec![AgentState::new(10.0, 5.0, 0.0, 3.0)],
            vec![true],
            vec![AgentGeometry { length: 4.0, width: 2.0 }],
            MapMesh::default(),
        )
    }

    #[test]
    fn empty_map_single_ego() {
        let (states, present, geoms, map) = single_ego_scene();
        let scene = SceneView { states: &states, present: &present, geometries: &geoms, map: &map, light_phases: &[] };
        let img = render(&cfg(), &scene, 0, None, 2.0);
        // 4 m × 2 m at 0.5 m/px, heading up: 4 columns × 8 rows.
        assert_eq!(img.count_color(palette::EGO), 32);
        assert_eq!(img.count_color(palette::BACKGROUND), 64 * 64 - 32);
        for r in 28..36 {
            for c in 30..34 {
                assert_eq!(img.pixel(c, r), palette::EGO);
            }
        }
        assert_eq!(img.count_color(palette::WAYPOINT), 0);
    }

    #[test]
    fn deterministic() {
        let (states, present, geoms, map) = single_ego_scene();
        let scene = SceneView { states: &states, present: &present, geometries: &geoms, map: &map, light_phases: &[] };
        assert_eq!(render(&cfg(), &scene, 0, Some([15.0, 5.0]), 2.0), render(&cfg(), &scene, 0, Some([15.0, 5.0]), 2.0));
    }

    #[test]
    fn waypoint_disk_ten_meters_ahead() {
        let states = vec![AgentState::new(0.0, 0.0, 0.0, 0.0)];
        let geoms = vec![AgentGeometry { length: 4.0, width: 2.0 }];
        let map = MapMesh::default();
        let scene = SceneView { states: &states, present: &[true], geometries: &geoms, map: &map, light_phases: &[] };
        let img = render(&cfg(), &scene, 0, Some([10.0, 0.0]), 2.0);
        let mut expected = 0;
        for r in 0..64 {
            for c in 0..64 {
                let inside = (c as f64 + 0.5 - 32.0).powi(2) + (r as f64 + 0.5 - 12.0).powi(2) <= 16.0;
                expected += inside as usize;
                assert_eq!(img.pixel(c, r) == palette::WAYPOINT, inside, "pixel {c},{r}");
            }
        }
        assert!(expected > 40);
    }

    #[test]
    fn far_waypoint_invisible() {
        let states = vec![AgentState::new(0.0, 0.0, 0.3, 0.0)];
        let geoms = vec![AgentGeometry::default()];
        let map = MapMesh::default();
        let scene = SceneView { states: &states, present: &[true], geometries: &geoms, map: &map, light_phases: &[] };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let ang = rng.gen_range(-PI..PI);
            // Circle of 2 m radius fully beyond the half-diagonal plus radius.
            let d = rng.gen_range(22.7 + 2.0..60.0);
            let img = render(&cfg(), &scene, 0, Some([d * ang.cos(), d * ang.sin()]), 2.0);
            assert_eq!(img.count_color(palette::WAYPOINT), 0);
        }
    }

    fn busy_scene(rng: &mut ChaCha8Rng) -> (Vec<AgentState>, Vec<AgentGeometry>, MapMesh) {
        let mut states = vec![];
        let mut geoms = vec![];
        for _ in 0..6 {
            states.push(AgentState::new(rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0), rng.gen_range(-PI..PI), 1.0));
            geoms.push(AgentGeometry { length: rng.gen_range(3.0..5.0), width: rng.gen_range(1.5..2.2) });
        }
        let map = MapMesh {
            triangles: vec![[-30.0, -4.0, 30.0, -4.0, 30.0, 4.0], [-30.0, -4.0, 30.0, 4.0, -30.0, 4.0], [-4.0, -30.0, 4.0, -30.0, 0.0, 30.0]],
            traffic_lights: vec![TrafficLight {
                position: [5.0, 5.0],
                stop_line: [[4.0, 0.0], [4.0, 4.0]],
                cycle: LightCycle { green: 1.0, yellow: 1.0, red: 1.0, offset: 0.0 },
            }],
            stop_signs: vec![],
        };
        (states, geoms, map)
    }

    #[test]
    fn rotation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (states, geoms, map) = busy_scene(&mut rng);
            let present = vec![true; states.len()];
            let phases = [LightPhase::Red];
            let wp = [states[0].x + 6.0, states[0].y - 3.0];
            let scene = SceneView { states: &states, present: &present, geometries: &geoms, map: &map, light_phases: &phases };
            let base = render(&cfg(), &scene, 0, Some(wp), 2.0);

            let phi = rng.gen_range(-PI..PI);
            let (s, c) = phi.sin_cos();
            let rot = |p: [f64; 2]| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
            let rstates: Vec<_> = states
                .iter()
                .map(|a| {
                    let p = rot([a.x, a.y]);
                    AgentState::new(p[0], p[1], a.psi + phi, a.v)
                })
                .collect();
            let rmap = MapMesh {
                triangles: map
                    .triangles
                    .iter()
                    .map(|t| {
                        let (a, b, cc) = (rot([t[0], t[1]]), rot([t[2], t[3]]), rot([t[4], t[5]]));
                        [a[0], a[1], b[0], b[1], cc[0], cc[1]]
                    })
                    .collect(),
                traffic_lights: map
                    .traffic_lights
                    .iter()
                    .map(|l| TrafficLight { position: rot(l.position), stop_line: l.stop_line.map(rot), cycle: l.cycle })
                    .collect(),
                stop_signs: vec![],
            };
            let rscene = SceneView { states: &rstates, present: &present, geometries: &geoms, map: &rmap, light_phases: &phases };
            let rotated = render(&cfg(), &rscene, 0, Some(rot(wp)), 2.0);
            let diff = base.pixels().iter().zip(rotated.pixels()).filter(|(a, b)| a != b).count();
            assert_eq!(diff, 0, "rotation by {phi} changed {diff} bytes");
        }
    }

    #[test]
    fn absent_agents_skipped_and_ego_on_top() {
        let states = vec![AgentState::new(0.0, 0.0, 0.0, 0.0), AgentState::new(1.0, 0.0, 0.0, 0.0), AgentState::new(0.0, 8.0, 0.0, 0.0)];
        let geoms = vec![AgentGeometry { length: 4.0, width: 2.0 }; 3];
        let map = MapMesh::default();
        let scene = SceneView { states: &states, present: &[true, true, false], geometries: &geoms, map: &map, light_phases: &[] };
        let img = render(&cfg(), &scene, 0, None, 2.0);
        assert_eq!(img.pixel(32, 32), palette::EGO);
        // Agent 1 sticks out 1 m ahead of the ego; agent 2 is absent.
        assert_eq!(img.count_color(palette::OTHER_AGENT), 4 * 2);
    }
}
