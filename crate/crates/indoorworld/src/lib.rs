//! Procedural two-domain indoor navigation environment.
//!
//! Houses are generated from `(domain, seed)`, rendered first-person with a
//! column raycaster in either visual style, and stepped with a discrete
//! three-action transition and distance-shaped reward.

mod error;

pub mod bank;
pub mod env;
pub mod house;
pub mod images;
pub mod path;
pub mod render;
pub mod split;

pub use bank::{houses_from_bytes, houses_to_bytes, load_houses, save_houses};
pub use env::{
    is_valid_pose, sample_episode, step, transition, Action, AgentPose, Episode, EpisodeSpec, Observation,
    StepOutcome, DEFAULT_MAX_STEPS,
};
pub use error::{Result, WorldError};
pub use house::{generate_house, generate_with, Domain, Door, GenParams, HousePlan, Rect, Room, RoomType, CELL_SIZE};
pub use images::{sample_from_houses, sample_images, ImageBank};
pub use path::{pose_distance, shortest_path_length};
pub use render::{render, render_styled, Image, IMAGE_LEN, IMAGE_SIZE};
pub use split::{house_seed, house_set, house_set_with, Split};

/// Folds `parts` into one well-mixed 64-bit seed (splitmix64 finalizer per
/// element).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
