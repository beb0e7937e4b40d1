//! First-person column raycaster.
//!
//! One ray per image column across a 60 degree field of view; each ray walks
//! the cell grid (DDA) to the first wall and draws a centred wall slice of
//! height `WALL_SCALE / perpendicular_distance` pixels. The wall colour comes
//! from the room type of the floor cell the ray left.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::env::{is_valid_pose, AgentPose};
use crate::error::{Result, WorldError};
use crate::house::{Domain, HousePlan, RoomType, CELL_SIZE};
use crate::mix_seed;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
pub const FOV_DEG: f64 = 60.0;
/// Wall slice height in pixels at 1 m perpendicular distance.
pub const WALL_SCALE: f64 = 16.0;
pub const REAL_NOISE_SIGMA: f64 = 0.05;

/// Row-major `32 x 32 x 3` (height, width, channel) image with values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn blank() -> Self {
        Self {
            pixels: vec![0.0; IMAGE_LEN],
        }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * IMAGE_SIZE + col) * CHANNELS + ch]
    }

    fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let k = (row * IMAGE_SIZE + col) * CHANNELS;
        for c in 0..3 {
            self.pixels[k + c] = rgb[c].clamp(0.0, 1.0) as f32;
        }
    }

    /// Planar `3 x 32 x 32` copy, the layout convolutions consume.
    pub fn to_chw(&self) -> Vec<f32> {
        let mut out = vec![0.0; IMAGE_LEN];
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                for ch in 0..CHANNELS {
                    out[(ch * IMAGE_SIZE + r) * IMAGE_SIZE + c] = self.get(r, c, ch);
                }
            }
        }
        out
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / IMAGE_LEN as f64
    }
}

/// First wall hit along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    /// Distance along the ray in meters.
    pub distance: f64,
    /// Wall cell that was hit.
    pub cell: (i64, i64),
    /// Floor cell the ray was in just before the hit.
    pub from_cell: (i64, i64),
    /// True when the face is perpendicular to the x axis.
    pub x_face: bool,
    /// Position along the face in [0,1).
    pub u: f64,
}

/// Walks the grid from `(x, y)` meters along `angle_deg` (0 = +x, growing
/// towards +y) to the first wall cell.
pub fn cast_ray(house: &HousePlan, x: f64, y: f64, angle_deg: f64) -> RayHit {
    let (dx, dy) = (angle_deg.to_radians().cos(), angle_deg.to_radians().sin());
    let (px, py) = (x / CELL_SIZE, y / CELL_SIZE);
    let (mut cx, mut cy) = (px.floor() as i64, py.floor() as i64);
    let step_x = if dx >= 0.0 { 1 } else { -1 };
    let step_y = if dy >= 0.0 { 1 } else { -1 };
    let delta_x = if dx == 0.0 { f64::INFINITY } else { (1.0 / dx).abs() };
    let delta_y = if dy == 0.0 { f64::INFINITY } else { (1.0 / dy).abs() };
    let mut side_x = if dx >= 0.0 { (cx as f64 + 1.0 - px) * delta_x } else { (px - cx as f64) * delta_x };
    let mut side_y = if dy >= 0.0 { (cy as f64 + 1.0 - py) * delta_y } else { (py - cy as f64) * delta_y };
    let limit = (house.width + house.height) as i64 * 2;
    for _ in 0..limit {
        let from = (cx, cy);
        let x_face = side_x < side_y;
        let t = if x_face {
            let t = side_x;
            side_x += delta_x;
            cx += step_x;
            t
        } else {
            let t = side_y;
            side_y += delta_y;
            cy += step_y;
            t
        };
        if !house.is_floor(cx, cy) {
            let along = if x_face { py + t * dy } else { px + t * dx };
            return RayHit {
                distance: t * CELL_SIZE,
                cell: (cx, cy),
                from_cell: from,
                x_face,
                u: along - along.floor(),
            };
        }
    }
    unreachable!("house grid is enclosed by walls")
}

fn base_wall_color(t: RoomType) -> [f64; 3] {
    match t {
        RoomType::Bedroom => [0.80, 0.30, 0.30],
        RoomType::Bathroom => [0.30, 0.50, 0.90],
        RoomType::Kitchen => [0.90, 0.80, 0.30],
        RoomType::LivingRoom => [0.30, 0.80, 0.40],
        RoomType::Corridor => [0.65, 0.65, 0.65],
    }
}

const CEILING: [f64; 3] = [0.92, 0.92, 0.92];
const FLOOR: [f64; 3] = [0.45, 0.40, 0.35];
const CLUTTER: [f64; 3] = [0.30, 0.22, 0.18];

/// Per-channel affine map from the synthetic palette to the real one.
const REAL_GAIN: [f64; 3] = [0.35, 0.40, 0.35];
const REAL_OFFSET: [f64; 3] = [0.45, 0.40, 0.42];

fn real_palette(c: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| REAL_GAIN[i] * c[i] + REAL_OFFSET[i])
}

fn scaled(c: [f64; 3], k: f64) -> [f64; 3] {
    c.map(|v| v * k)
}

/// Renders with the house's own domain style.
pub fn render(house: &HousePlan, pose: &AgentPose) -> Result<Image> {
    render_styled(house, pose, house.domain)
}

/// Renders the geometry of `house` in the visual style of `style`.
///
/// Synthetic: flat per-room-type wall colours, no noise. Real: shifted
/// palette, striped wall texture, per-house clutter and Gaussian pixel noise
/// seeded from the house seed and the pose.
pub fn render_styled(house: &HousePlan, pose: &AgentPose, style: Domain) -> Result<Image> {
    if !is_valid_pose(house, pose) {
        return Err(WorldError::InvalidPose { x: pose.x, y: pose.y });
    }
    let real = style == Domain::Real;
    let pal = |c: [f64; 3]| if real { real_palette(c) } else { c };
    let mut img = Image::blank();
    let half = IMAGE_SIZE as f64 / 2.0;
    for col in 0..IMAGE_SIZE {
        let offset = -FOV_DEG / 2.0 + FOV_DEG * (col as f64 + 0.5) / IMAGE_SIZE as f64;
        let hit = cast_ray(house, pose.x, pose.y, pose.heading + offset);
        let perp = (hit.distance * offset.to_radians().cos()).max(1e-6);
        let h = (WALL_SCALE / perp).round().min(IMAGE_SIZE as f64) as usize;
        let top = (IMAGE_SIZE - h) / 2;
        let room = house
            .room_at_cell(hit.from_cell.0 as usize, hit.from_cell.1 as usize)
            .map(|r| house.rooms[r].room_type)
            .unwrap_or(RoomType::Corridor);
        let shade = if hit.x_face { 1.0 } else { 0.8 } / (1.0 + 0.15 * perp);
        let mut wall = scaled(pal(base_wall_color(room)), shade);
        let mut clutter_from = IMAGE_SIZE;
        if real {
            if ((hit.u * 4.0) as usize) % 2 == 1 {
                wall = scaled(wall, 0.85);
            }
            let face = mix_seed(&[
                house.seed,
                hit.cell.0 as u64,
                hit.cell.1 as u64,
                hit.from_cell.0 as u64,
                hit.from_cell.1 as u64,
            ]);
            let start = 0.15 + (face >> 32) as f64 / u32::MAX as f64 * 0.45;
            if face % 100 < 30 && hit.u >= start && hit.u < start + 0.3 {
                clutter_from = top + h - (h as f64 * 0.45) as usize;
            }
        }
        for row in 0..IMAGE_SIZE {
            let rgb = if row < top {
                pal(CEILING)
            } else if row >= top + h {
                // floor darkens towards the horizon
                scaled(pal(FLOOR), 0.6 + 0.4 * (row as f64 - half) / half)
            } else if row >= clutter_from {
                scaled(CLUTTER, shade)
            } else {
                wall
            };
            img.set(row, col, rgb);
        }
    }
    if real {
        let seed = mix_seed(&[house.seed, pose.x.to_bits(), pose.y.to_bits(), pose.heading.to_bits()]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, REAL_NOISE_SIGMA).unwrap();
        for p in img.pixels.iter_mut() {
            *p = (*p as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::house::{Door, Rect, Room};

    fn box_house(w: usize, h: usize) -> HousePlan {
        let rooms = vec![
            Room {
                rect: Rect { x: 1, y: 1, w, h },
                room_type: RoomType::Bedroom,
            },
            Room {
                rect: Rect { x: w + 2, y: 1, w: 3, h: 3 },
                room_type: RoomType::Kitchen,
            },
        ];
        let doors = vec![Door { a: 0, b: 1, cell: (w + 1, 1) }];
        HousePlan::from_layout(w + 7, h + 2, rooms, doors, Domain::Synthetic, 9).unwrap()
    }

    fn wall_height(img: &Image, col: usize) -> usize {
        let c = base_wall_color(RoomType::Bedroom);
        (0..IMAGE_SIZE)
            .filter(|&r| {
                let px = [img.get(r, col, 0), img.get(r, col, 1), img.get(r, col, 2)];
                // wall pixels keep the bedroom hue ratio
                (px[0] as f64 / px[1].max(1e-6) as f64 - c[0] / c[1]).abs() < 1e-3
            })
            .count()
    }

    #[test]
    fn wall_height_inverse_to_distance() {
        // Bedroom interior spans x in [0.5, 5.5) m; facing -x from x=1.5 and 2.5.
        let house = box_house(10, 8);
        let y = 2.5;
        let near = render(&house, &AgentPose::new(1.5, y, 180.0)).unwrap();
        let far = render(&house, &AgentPose::new(2.5, y, 180.0)).unwrap();
        let (hn, hf) = (wall_height(&near, 16), wall_height(&far, 16));
        assert_eq!(hn, 16);
        assert!((hn as i64 - 2 * hf as i64).abs() <= 1, "{hn} vs {hf}");
    }

    #[test]
    fn ray_distance_straight() {
        let house = box_house(10, 8);
        let hit = cast_ray(&house, 1.5, 2.5, 180.0);
        assert!((hit.distance - 1.0).abs() < 1e-9);
        assert!(hit.x_face);
        assert_eq!(hit.cell, (0, 5));
    }

    #[test]
    fn invalid_pose_rejected() {
        let house = box_house(6, 6);
        assert!(matches!(
            render(&house, &AgentPose::new(0.2, 0.2, 0.0)),
            Err(WorldError::InvalidPose { .. })
        ));
    }

    #[test]
    fn deterministic_and_in_range() {
        let house = box_house(6, 6);
        let pose = AgentPose::new(1.7, 1.9, 30.0);
        for style in Domain::BOTH {
            let a = render_styled(&house, &pose, style).unwrap();
            let b = render_styled(&house, &pose, style).unwrap();
            assert_eq!(a, b);
            assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
