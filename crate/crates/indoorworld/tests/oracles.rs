//! Independent oracles for house generation, geodesics and the transition.

use std::collections::HashMap;
use std::sync::Arc;

use indoorworld::env::{goal_centroids, goal_distance, is_valid_pose, random_pose, step, Action, AgentPose, Episode};
use indoorworld::{
    generate_house, house_set, pose_distance, render_styled, sample_episode, shortest_path_length, Domain, HousePlan,
    RoomType, Split, CELL_SIZE,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Dsu(Vec<usize>);

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu((0..n).collect())
    }
    fn find(&mut self, i: usize) -> usize {
        let p = self.0[i];
        if p == i {
            return i;
        }
        let r = self.find(p);
        self.0[i] = r;
        r
    }
    /// False when `a` and `b` were already joined.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra] = rb;
        ra != rb
    }
}

/// Rebuilds every structural claim from rects, types and door records alone.
fn check_house(h: &HousePlan) -> Result<(), String> {
    let n = h.rooms.len();
    let (lo, hi) = match h.domain {
        Domain::Synthetic => (2, 5),
        Domain::Real => (5, 10),
    };
    if n < lo || n > hi {
        return Err(format!("{n} rooms"));
    }
    let door_at: HashMap<(usize, usize), usize> = h.doors.iter().map(|d| (d.cell, d.a)).collect();
    for y in 0..h.height {
        for x in 0..h.width {
            let owners: Vec<usize> = (0..n).filter(|&i| h.rooms[i].rect.contains(x, y)).collect();
            let floor = h.is_floor(x as i64, y as i64);
            match (floor, door_at.get(&(x, y))) {
                (true, Some(&a)) => {
                    if !owners.is_empty() || h.room_at_cell(x, y) != Some(a) {
                        return Err(format!("door cell ({x},{y})"));
                    }
                }
                (true, None) => {
                    if owners.len() != 1 || h.room_at_cell(x, y) != Some(owners[0]) {
                        return Err(format!("floor cell ({x},{y}) has owners {owners:?}"));
                    }
                }
                (false, Some(_)) => return Err(format!("door cell ({x},{y}) is a wall")),
                (false, None) => {
                    if !owners.is_empty() {
                        return Err(format!("room interior ({x},{y}) is a wall"));
                    }
                }
            }
        }
    }
    // Each door must touch both of its rooms across opposite sides.
    for d in &h.doors {
        let (x, y) = d.cell;
        let touches = |r: usize| {
            let rc = h.rooms[r].rect;
            [(x + 1, y), (x, y + 1), (x.wrapping_sub(1), y), (x, y.wrapping_sub(1))]
                .iter()
                .any(|&(px, py)| rc.contains(px, py))
        };
        if !touches(d.a) || !touches(d.b) {
            return Err(format!("door {d:?} does not touch its rooms"));
        }
    }
    let mut dsu = Dsu::new(n);
    let mut cycle = false;
    for d in &h.doors {
        if !dsu.union(d.a, d.b) {
            cycle = true;
        }
    }
    let root = dsu.find(0);
    if (0..n).any(|i| dsu.find(i) != root) {
        return Err("room graph disconnected".into());
    }
    match h.domain {
        Domain::Synthetic if h.doors.len() != n - 1 || cycle => return Err("synthetic house is not a tree".into()),
        Domain::Real if h.doors.len() < n || !cycle => return Err("real house has no cycle".into()),
        _ => {}
    }
    for (i, r) in h.rooms.iter().enumerate() {
        let need = match r.room_type {
            RoomType::Bathroom => RoomType::Bedroom,
            RoomType::Kitchen => RoomType::LivingRoom,
            _ => continue,
        };
        let ok = h.doors.iter().any(|d| {
            let other = if d.a == i { d.b } else if d.b == i { d.a } else { return false };
            h.rooms[other].room_type == need
        });
        if !ok {
            return Err(format!("room {i} ({}) lacks a {} neighbour", r.room_type, need));
        }
    }
    // Geometric connectivity of the floor itself.
    let cells: Vec<(usize, usize)> = h.floor_cells().collect();
    let mut seen = vec![false; h.width * h.height];
    let mut stack = vec![cells[0]];
    seen[cells[0].1 * h.width + cells[0].0] = true;
    let mut reached = 1;
    while let Some((x, y)) = stack.pop() {
        for (nx, ny) in [(x + 1, y), (x, y + 1), (x.wrapping_sub(1), y), (x, y.wrapping_sub(1))] {
            if h.is_floor(nx as i64, ny as i64) && !seen[ny * h.width + nx] {
                seen[ny * h.width + nx] = true;
                reached += 1;
                stack.push((nx, ny));
            }
        }
    }
    if reached != cells.len() {
        return Err("floor is not one connected region".into());
    }
    Ok(())
}

#[test]
fn thousand_seeds_per_domain_pass_graph_checker() {
    for domain in Domain::BOTH {
        for seed in 0..1000u64 {
            let h = generate_house(domain, seed).unwrap();
            if let Err(e) = check_house(&h) {
                panic!("{domain:?} seed {seed}: {e}");
            }
        }
    }
}

/// Multi-source BFS from every goal cell outward, using Vec-based levels
/// rather than a single queue.
fn oracle_distance(h: &HousePlan, start: (usize, usize), goal: RoomType) -> Option<usize> {
    let mut frontier: Vec<(usize, usize)> = h
        .floor_cells()
        .filter(|&(x, y)| h.room_at_cell(x, y).map(|r| h.rooms[r].room_type) == Some(goal))
        .collect();
    let mut visited = vec![false; h.width * h.height];
    for &(x, y) in &frontier {
        visited[y * h.width + x] = true;
    }
    let mut level = 0;
    while !frontier.is_empty() {
        if frontier.contains(&start) {
            return Some(level);
        }
        let mut next = Vec::new();
        for &(x, y) in &frontier {
            for (dx, dy) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if h.is_floor(nx, ny) && !visited[ny as usize * h.width + nx as usize] {
                    visited[ny as usize * h.width + nx as usize] = true;
                    next.push((nx as usize, ny as usize));
                }
            }
        }
        frontier = next;
        level += 1;
    }
    None
}

#[test]
fn shortest_path_matches_bfs_oracle_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..100u64 {
        let domain = if i % 2 == 0 { Domain::Synthetic } else { Domain::Real };
        let h = generate_house(domain, 5000 + i).unwrap();
        let ep = sample_episode(&h, 500, &mut rng).unwrap();
        let (cx, cy) = ep.start.cell();
        let want = oracle_distance(&h, (cx as usize, cy as usize), ep.goal).expect("goal reachable");
        let got = shortest_path_length(&h, &ep.start, ep.goal).unwrap();
        assert_eq!(got, want as f64 * CELL_SIZE, "instance {i}");
    }
}

#[test]
fn random_walks_never_leave_the_floor() {
    let houses: Vec<HousePlan> = (0..20u64)
        .map(|s| generate_house(if s % 2 == 0 { Domain::Real } else { Domain::Synthetic }, 900 + s).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bound = 0.25 + 0.01 + 1.0 + 1e-9;
    let mut steps = 0;
    while steps < 100_000 {
        let h = &houses[rng.gen_range(0..houses.len())];
        let cells: Vec<_> = h.floor_cells().collect();
        let goal = h.rooms[rng.gen_range(0..h.rooms.len())].room_type;
        let mut pose = random_pose(h, &cells, &mut rng);
        for _ in 0..500 {
            let a = Action::ALL[rng.gen_range(0..3)];
            let out = step(h, &pose, a, goal);
            assert!(is_valid_pose(h, &out.pose), "left the floor at {:?}", out.pose);
            assert!(out.reward.abs() <= bound, "reward {}", out.reward);
            assert!((0.0..360.0).contains(&out.pose.heading));
            pose = out.pose;
            steps += 1;
        }
    }
}

#[test]
fn blocked_forward_costs_only_the_step_penalty() {
    let h = generate_house(Domain::Synthetic, 1).unwrap();
    let goal = h.rooms[0].room_type;
    let cells: Vec<_> = h.floor_cells().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut seen = 0;
    for _ in 0..2000 {
        let pose = random_pose(&h, &cells, &mut rng);
        let out = step(&h, &pose, Action::Forward, goal);
        if out.pose == pose {
            // a blocked move only earns the bonus if it already stood in the goal
            let bonus = if out.reached { 1.0 } else { 0.0 };
            assert!((out.reward + 0.01 - bonus).abs() < 1e-12);
            seen += 1;
        } else {
            let c = goal_centroids(&h, goal);
            let d0 = goal_distance(&c, pose.x, pose.y);
            let d1 = goal_distance(&c, out.pose.x, out.pose.y);
            let bonus = if out.reached { 1.0 } else { 0.0 };
            assert!((out.reward - (d0 - d1 - 0.01 + bonus)).abs() < 1e-12);
        }
    }
    assert!(seen > 0, "no blocked move sampled");
}

#[test]
fn real_style_differs_from_synthetic_on_100_poses() {
    let h = generate_house(Domain::Real, 77).unwrap();
    let cells: Vec<_> = h.floor_cells().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut total = 0.0;
    for _ in 0..100 {
        let pose = random_pose(&h, &cells, &mut rng);
        let a = render_styled(&h, &pose, Domain::Synthetic).unwrap();
        let b = render_styled(&h, &pose, Domain::Real).unwrap();
        assert!(a.pixels.iter().chain(&b.pixels).all(|p| (0.0..=1.0).contains(p)));
        total += a.mean_abs_diff(&b);
    }
    let mean = total / 100.0;
    assert!(mean > 0.05, "mean abs diff {mean}");
}

#[test]
fn rendering_and_generation_are_deterministic() {
    let a = generate_house(Domain::Real, 42).unwrap();
    let b = generate_house(Domain::Real, 42).unwrap();
    assert_eq!(a, b);
    let pose = random_pose(&a, &a.floor_cells().collect::<Vec<_>>(), &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(render_styled(&a, &pose, Domain::Real).unwrap(), render_styled(&b, &pose, Domain::Real).unwrap());
}

#[test]
fn episodes_on_split_houses_never_start_in_goal() {
    let houses = house_set(Domain::Real, Split::Val, 6, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for h in houses {
        let h = Arc::new(h);
        for _ in 0..10 {
            let spec = sample_episode(&h, 500, &mut rng).unwrap();
            let ep = Episode::new(h.clone(), &spec).unwrap();
            assert!(!ep.reached);
            assert!(h.has_room_type(spec.goal));
            assert!(h.room_at(spec.start.x, spec.start.y).map(|r| h.rooms[r].room_type) != Some(spec.goal));
        }
    }
}

fn house_and_poses() -> impl Strategy<Value = (u64, [u64; 3])> {
    (0u64..200, any::<[u64; 3]>())
}

proptest! {
    #[test]
    fn pose_distance_obeys_triangle_inequality((seed, picks) in house_and_poses()) {
        let h = generate_house(Domain::Real, seed).unwrap();
        let cells: Vec<_> = h.floor_cells().collect();
        let pose = |k: u64| {
            let (x, y) = cells[(k % cells.len() as u64) as usize];
            AgentPose::new((x as f64 + 0.5) * CELL_SIZE, (y as f64 + 0.5) * CELL_SIZE, 0.0)
        };
        let (a, b, c) = (pose(picks[0]), pose(picks[1]), pose(picks[2]));
        let ab = pose_distance(&h, &a, &b).unwrap();
        let bc = pose_distance(&h, &b, &c).unwrap();
        let ac = pose_distance(&h, &a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-12);
        prop_assert_eq!(ab, pose_distance(&h, &b, &a).unwrap());
    }
}

#[test]
fn successful_paths_respect_the_geodesic_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut wins = 0;
    for i in 0..400u64 {
        let domain = if i % 2 == 0 { Domain::Synthetic } else { Domain::Real };
        let h = Arc::new(generate_house(domain, 2000 + i % 40).unwrap());
        let spec = sample_episode(&h, 3000, &mut rng).unwrap();
        let l = shortest_path_length(&h, &spec.start, spec.goal).unwrap();
        let mut ep = Episode::new(h.clone(), &spec).unwrap();
        while !ep.is_done() {
            let a = if rng.gen_bool(0.6) { Action::Forward } else { Action::ALL[rng.gen_range(0..3)] };
            ep.step(a);
        }
        if ep.reached {
            wins += 1;
            // grid geodesics run along axes, the agent may cut diagonally
            assert!(ep.path_len >= (l - CELL_SIZE) / std::f64::consts::SQRT_2 - 1e-9, "p {} l {l}", ep.path_len);
        }
    }
    assert!(wins > 50);
}
