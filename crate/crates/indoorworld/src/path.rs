//! Geodesic distances over the 4-connected floor-cell graph.

use std::collections::VecDeque;

use crate::env::AgentPose;
use crate::error::{Result, WorldError};
use crate::house::{HousePlan, RoomType, CELL_SIZE};

/// BFS hop counts from `start` to every floor cell (`u32::MAX` = unreached).
pub fn bfs_from(house: &HousePlan, start: (usize, usize)) -> Vec<u32> {
    let (w, h) = (house.width, house.height);
    let mut dist = vec![u32::MAX; w * h];
    if !house.is_floor(start.0 as i64, start.1 as i64) {
        return dist;
    }
    dist[start.1 * w + start.0] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some((x, y)) = queue.pop_front() {
        let d = dist[y * w + x];
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if house.is_floor(nx, ny) {
                let k = ny as usize * w + nx as usize;
                if dist[k] == u32::MAX {
                    dist[k] = d + 1;
                    queue.push_back((nx as usize, ny as usize));
                }
            }
        }
    }
    dist
}

fn pose_cell(house: &HousePlan, pose: &AgentPose) -> Result<(usize, usize)> {
    let (cx, cy) = pose.cell();
    if !house.is_floor(cx, cy) {
        return Err(WorldError::InvalidPose { x: pose.x, y: pose.y });
    }
    Ok((cx as usize, cy as usize))
}

/// Meters from the start pose's cell to the nearest cell of any room of the
/// goal type, 0.5 m per edge.
pub fn shortest_path_length(house: &HousePlan, start: &AgentPose, goal: RoomType) -> Result<f64> {
    let s = pose_cell(house, start)?;
    let dist = bfs_from(house, s);
    house
        .floor_cells()
        .filter(|&(x, y)| house.room_at_cell(x, y).is_some_and(|r| house.rooms[r].room_type == goal))
        .map(|(x, y)| dist[y * house.width + x])
        .filter(|&d| d != u32::MAX)
        .min()
        .map(|d| d as f64 * CELL_SIZE)
        .ok_or_else(|| WorldError::Unreachable(goal.to_string()))
}

/// Geodesic distance between the cells of two poses.
pub fn pose_distance(house: &HousePlan, a: &AgentPose, b: &AgentPose) -> Result<f64> {
    let (sa, sb) = (pose_cell(house, a)?, pose_cell(house, b)?);
    let d = bfs_from(house, sa)[sb.1 * house.width + sb.0];
    if d == u32::MAX {
        return Err(WorldError::Unreachable(format!("cell {sb:?}")));
    }
    Ok(d as f64 * CELL_SIZE)
}
