//! Kinematic position-target simulation for the four planar embodiments,
//! plus the scripted experts.
//!
//! Dynamics are deliberately trivial: controlled coordinates move toward the
//! commanded targets under a per-step rate limit; blocks follow the
//! end-effector under sticky contact (pusher) or an explicit grasp latch
//! (gripper). Progress is a latched fraction of task subgoals (e.g. grasped =
//! 0.5, placed = 1.0) so it is monotone within an episode and success implies
//! progress 1.0.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::Observation;

use super::render::{render, PerturbationConfig};
use super::{Goal, TaskInstance, ToyEmbodiment, PUSHER_LINKS, REACHER_LINKS};

/// Per-step rate limits: radians for joints, world units for positions,
/// fraction for the gripper channel.
pub const MAX_DELTA_ANGLE: f64 = 0.3;
pub const MAX_DELTA_POS: f64 = 0.12;
pub const MAX_DELTA_GRIP: f64 = 0.5;

/// Consecutive in-radius steps a reach goal must hold before it counts.
pub const DWELL_STEPS: usize = 3;

/// Sticky-contact radius of the pusher and grasp radius of the gripper.
pub const CONTACT_RADIUS: f64 = 0.08;
pub const GRASP_RADIUS: f64 = 0.07;

#[derive(Debug, Clone)]
pub struct SimState {
    pub task: TaskInstance,
    /// Controlled coordinates (joint angles or positions), length D.
    pub q: Vec<f64>,
    /// Mutable object positions (layout-perturbed copies of the scene).
    pub obj_pos: Vec<[f64; 2]>,
    /// Robot-perturbation scale on link lengths.
    pub link_scale: f64,
    pub step: usize,
    pub success: bool,
    /// Latched max subgoal fraction.
    pub progress: f64,
    /// Out-of-bounds actions clipped so far.
    pub clip_count: usize,
    /// Gripper grasp latch (object index).
    pub grasped: Option<usize>,
    /// Pusher has touched the block at least once.
    pub touched: bool,
    /// Gripper has grasped at least once.
    pub ever_grasped: bool,
    /// Consecutive steps the reach predicate has held (reach goals only).
    pub dwell: usize,
    pub perturb: PerturbationConfig,
    pub episode_seed: u64,
    pub resolution: usize,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Forward kinematics of a planar chain with cumulative joint angles.
pub fn chain_fk(q: &[f64], links: &[f64], scale: f64) -> [f64; 2] {
    let mut p = [0.0, 0.0];
    let mut a = 0.0;
    for (qi, li) in q.iter().zip(links) {
        a += qi;
        p[0] += li * scale * a.cos();
        p[1] += li * scale * a.sin();
    }
    p
}

/// All joint positions of the chain including the base, for rendering.
pub fn chain_points(q: &[f64], links: &[f64], scale: f64) -> Vec<[f64; 2]> {
    let mut pts = vec![[0.0, 0.0]];
    let mut a = 0.0;
    let mut p = [0.0, 0.0];
    for (qi, li) in q.iter().zip(links) {
        a += qi;
        p[0] += li * scale * a.cos();
        p[1] += li * scale * a.sin();
        pts.push(p);
    }
    pts
}

impl SimState {
    /// End-effector position(s). Dual-arm returns the left arm; use
    /// `ee_pair` for both.
    pub fn ee(&self) -> [f64; 2] {
        match self.task.embodiment {
            ToyEmbodiment::Reacher2 => chain_fk(&self.q, &REACHER_LINKS, self.link_scale),
            ToyEmbodiment::Pusher3 => chain_fk(&self.q, &PUSHER_LINKS, self.link_scale),
            ToyEmbodiment::Gripper4 => [self.q[0], self.q[1]],
            ToyEmbodiment::DualArm8 => [self.q[0], self.q[1]],
        }
    }

    pub fn ee_pair(&self) -> ([f64; 2], [f64; 2]) {
        match self.task.embodiment {
            ToyEmbodiment::DualArm8 => ([self.q[0], self.q[1]], [self.q[4], self.q[5]]),
            _ => (self.ee(), self.ee()),
        }
    }

    pub fn gripper_closed(&self) -> bool {
        matches!(self.task.embodiment, ToyEmbodiment::Gripper4) && self.q[3] >= 0.5
    }

    pub fn observe(&self) -> Observation {
        Observation {
            frames: vec![render(self, &self.perturb, self.frame_seed())],
            instruction: self.task.instruction.clone(),
            proprio: self.q.clone(),
            step_index: self.step,
        }
    }

    fn frame_seed(&self) -> u64 {
        self.episode_seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(self.step as u64)
    }
}

/// Initializes an episode: applies layout/robot/language perturbations (all
/// seeded) and renders the first observation. Deterministic in
/// `(task, seed, perturb)`.
pub fn reset(
    task: &TaskInstance,
    seed: u64,
    perturb: &PerturbationConfig,
    resolution: usize,
) -> (SimState, Observation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut task = task.clone();

    // layout: shift objects beyond the training placement range
    let mut obj_pos: Vec<[f64; 2]> = task.scene.objects.iter().map(|o| o.pos).collect();
    if perturb.layout_shift > 0.0 {
        for p in &mut obj_pos {
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            p[0] += perturb.layout_shift * a.cos();
            p[1] += perturb.layout_shift * a.sin();
        }
    }
    // robot: link-length jitter
    let link_scale = if perturb.robot_jitter > 0.0 {
        1.0 + rng.gen_range(-perturb.robot_jitter..perturb.robot_jitter)
    } else {
        1.0
    };
    // language: paraphrase from the fixed bank
    if perturb.language_paraphrase {
        let bank = paraphrases(&task);
        if !bank.is_empty() {
            task.instruction = bank[rng.gen_range(0..bank.len())].clone();
        }
    }

    let q = match task.embodiment {
        ToyEmbodiment::Reacher2 => vec![0.6, -0.4],
        ToyEmbodiment::Pusher3 => vec![0.6, -0.4, 0.2],
        ToyEmbodiment::Gripper4 => vec![0.0, -0.8, 0.0, 0.0],
        ToyEmbodiment::DualArm8 => vec![-0.5, -0.8, 0.0, 0.0, 0.5, -0.8, 0.0, 0.0],
    };
    let state = SimState {
        task,
        q,
        obj_pos,
        link_scale,
        step: 0,
        success: false,
        progress: 0.0,
        clip_count: 0,
        grasped: None,
        touched: false,
        ever_grasped: false,
        dwell: 0,
        perturb: perturb.clone(),
        episode_seed: seed,
        resolution,
    };
    let obs = state.observe();
    (state, obs)
}

/// Fixed paraphrase bank per task family; each rewording still uniquely
/// identifies the goal.
pub fn paraphrases(task: &TaskInstance) -> Vec<String> {
    match &task.goal {
        Goal::ReachTarget { target } => {
            let c = &task.scene.objects[*target].color;
            vec![
                format!("move the arm to the {c} target"),
                format!("touch the {c} target"),
                format!("bring the end effector to the {c} target"),
            ]
        }
        Goal::PushToZone { block, zone } => {
            let b = &task.scene.objects[*block].color;
            let z = &task.scene.objects[*zone].color;
            vec![
                format!("slide the {b} block into the {z} zone"),
                format!("move the {b} block to the {z} zone"),
                format!("shove the {b} block inside the {z} zone"),
            ]
        }
        Goal::PlaceAtCell { block, row, col } => {
            let b = &task.scene.objects[*block].color;
            let (r, c) = (row + 1, col + 1);
            vec![
                format!("put the {b} block in row {r}, column {c}"),
                format!("pick up the {b} block and place it at row {r}, column {c}"),
                format!("set the {b} block down at row {r}, column {c}"),
            ]
        }
        Goal::ReachPair { a, b } => {
            let ca = &task.scene.objects[*a].color;
            let cb = &task.scene.objects[*b].color;
            vec![
                format!("touch the {ca} target with the left arm and the {cb} target with the right arm"),
                format!("left arm to the {ca} target, right arm to the {cb} target"),
            ]
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOut {
    pub observation: Observation,
    pub done: bool,
    pub success: bool,
    pub progress: f64,
}

/// Advances one control step. Total function: out-of-bounds actions are
/// clipped (and counted), success latches, progress never decreases.
pub fn step(state: &mut SimState, action: &[f64]) -> StepOut {
    let spec = state.task.embodiment.spec();
    assert_eq!(action.len(), spec.action_dim, "action width");

    // clip to bounds
    let mut clipped = false;
    let target: Vec<f64> = action
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let c = a.clamp(spec.action_low[i], spec.action_high[i]);
            if c != *a {
                clipped = true;
            }
            c
        })
        .collect();
    if clipped {
        state.clip_count += 1;
    }

    // rate-limited tracking of the position targets
    let rate = |i: usize| -> f64 {
        match state.task.embodiment {
            ToyEmbodiment::Reacher2 | ToyEmbodiment::Pusher3 => MAX_DELTA_ANGLE,
            ToyEmbodiment::Gripper4 => match i {
                2 => MAX_DELTA_ANGLE,
                3 => MAX_DELTA_GRIP,
                _ => MAX_DELTA_POS,
            },
            ToyEmbodiment::DualArm8 => match i % 4 {
                2 => MAX_DELTA_ANGLE,
                3 => MAX_DELTA_GRIP,
                _ => MAX_DELTA_POS,
            },
        }
    };
    let ee_before = state.ee();
    for i in 0..state.q.len() {
        let d = (target[i] - state.q[i]).clamp(-rate(i), rate(i));
        state.q[i] += d;
    }
    state.step += 1;

    // embodiment-specific object coupling
    match (&state.task.embodiment, state.task.goal.clone()) {
        (ToyEmbodiment::Pusher3, Goal::PushToZone { block, .. }) => {
            let ee_after = state.ee();
            if dist(ee_before, state.obj_pos[block]) <= CONTACT_RADIUS {
                state.touched = true;
                state.obj_pos[block][0] += ee_after[0] - ee_before[0];
                state.obj_pos[block][1] += ee_after[1] - ee_before[1];
            }
        }
        (ToyEmbodiment::Gripper4, Goal::PlaceAtCell { block, .. }) => {
            let ee = state.ee();
            if state.gripper_closed() {
                if state.grasped.is_none() && dist(ee, state.obj_pos[block]) <= GRASP_RADIUS {
                    state.grasped = Some(block);
                    state.ever_grasped = true;
                }
            } else {
                state.grasped = None;
            }
            if let Some(b) = state.grasped {
                state.obj_pos[b] = ee;
            }
        }
        _ => {}
    }

    // success predicate + subgoal progress
    let r = state.task.radius;
    let (succ, sub) = match state.task.goal.clone() {
        Goal::ReachTarget { target } => {
            let d = dist(state.ee(), state.obj_pos[target]);
            if d <= r {
                state.dwell += 1;
            } else {
                state.dwell = 0;
            }
            // a reach counts only if the arm settles at the target, so a
            // sweep through the goal region does not score
            (state.dwell >= DWELL_STEPS, if d <= 2.0 * r { 0.5 } else { 0.0 })
        }
        Goal::PushToZone { block, zone } => {
            let d = dist(state.obj_pos[block], state.obj_pos[zone]);
            (d <= r, if state.touched { 0.5 } else { 0.0 })
        }
        Goal::PlaceAtCell { block, row, col } => {
            let cell = super::grid_cell_center(row, col);
            let d = dist(state.obj_pos[block], cell);
            let placed = d <= r && state.grasped.is_none() && state.ever_grasped;
            (placed, if state.ever_grasped { 0.5 } else { 0.0 })
        }
        Goal::ReachPair { a, b } => {
            let (ea, eb) = state.ee_pair();
            let da = dist(ea, state.obj_pos[a]);
            let db = dist(eb, state.obj_pos[b]);
            if da <= r && db <= r {
                state.dwell += 1;
            } else {
                state.dwell = 0;
            }
            let one = da <= r || db <= r;
            (state.dwell >= DWELL_STEPS, if one { 0.5 } else { 0.0 })
        }
    };
    state.success |= succ;
    let frac = if state.success { 1.0 } else { sub };
    state.progress = state.progress.max(frac);

    let done = state.success || state.step >= state.task.horizon;
    StepOut {
        observation: state.observe(),
        done,
        success: state.success,
        progress: state.progress,
    }
}

/// Analytic 2-link inverse kinematics; picks the elbow branch closest to the
/// current configuration.
fn ik_two_link(target: [f64; 2], links: [f64; 2], current: &[f64]) -> Result<[f64; 2]> {
    let (l1, l2) = (links[0], links[1]);
    let d2 = target[0] * target[0] + target[1] * target[1];
    let d = d2.sqrt();
    if d > l1 + l2 || d < (l1 - l2).abs() {
        return Err(Error::IkFailure(target.to_vec()));
    }
    let cos_q2 = ((d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let mut best = [0.0, 0.0];
    let mut best_cost = f64::INFINITY;
    for sign in [1.0, -1.0] {
        let q2 = sign * cos_q2.acos();
        let mut q1 = target[1].atan2(target[0]) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
        // fold into the actuated [-pi, pi] range
        if q1 > std::f64::consts::PI {
            q1 -= std::f64::consts::TAU;
        } else if q1 < -std::f64::consts::PI {
            q1 += std::f64::consts::TAU;
        }
        let cost = (q1 - current[0]).abs() + (q2 - current[1]).abs();
        if cost < best_cost {
            best_cost = cost;
            best = [q1, q2];
        }
    }
    Ok(best)
}

/// Damped-least-squares inverse kinematics for a planar chain. Runs from the
/// current configuration plus a few canonical restarts (folded chains are
/// singular and trap a single warm start), then returns the converged
/// solution closest to the current joints. Deterministic.
fn ik_chain(target: [f64; 2], links: &[f64], scale: f64, current: &[f64]) -> Result<Vec<f64>> {
    let reach: f64 = links.iter().sum::<f64>() * scale;
    let d = (target[0] * target[0] + target[1] * target[1]).sqrt();
    if d > reach {
        return Err(Error::IkFailure(target.to_vec()));
    }
    let n = links.len();
    let theta = target[1].atan2(target[0]);
    let mut starts = vec![current.to_vec()];
    for bend in [0.0, 0.7, -0.7] {
        let mut s = vec![0.0; n];
        s[0] = theta + bend;
        for (j, v) in s.iter_mut().enumerate().skip(1) {
            *v = if j % 2 == 1 { -bend } else { bend };
        }
        starts.push(s);
    }
    let wrap = |x: f64| -> f64 {
        let mut y = x % std::f64::consts::TAU;
        if y > std::f64::consts::PI {
            y -= std::f64::consts::TAU;
        } else if y < -std::f64::consts::PI {
            y += std::f64::consts::TAU;
        }
        y
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in starts {
        let (q, err) = dls_solve(target, links, scale, &start);
        // keep FK intact but fold each joint into the actuated [-pi, pi] range
        let q: Vec<f64> = q.iter().map(|qi| wrap(*qi)).collect();
        if err < 1e-6 {
            let travel: f64 = q.iter().zip(current).map(|(a, b)| (a - b).abs()).sum();
            match &best {
                Some((t, _)) if *t <= travel => {}
                _ => best = Some((travel, q)),
            }
        }
    }
    match best {
        Some((_, q)) => Ok(q),
        None => Err(Error::IkFailure(target.to_vec())),
    }
}

/// One damped-least-squares descent; returns the final joints and the
/// residual end-effector error.
fn dls_solve(target: [f64; 2], links: &[f64], scale: f64, start: &[f64]) -> (Vec<f64>, f64) {
    let n = links.len();
    let mut q = start.to_vec();
    let lambda = 0.1;
    let mut err = f64::INFINITY;
    for _ in 0..200 {
        let p = chain_fk(&q, links, scale);
        let ex = target[0] - p[0];
        let ey = target[1] - p[1];
        err = (ex * ex + ey * ey).sqrt();
        if err < 1e-9 {
            break;
        }
        // Jacobian of the planar chain
        let mut jx = vec![0.0; n];
        let mut jy = vec![0.0; n];
        let mut a = 0.0;
        let mut joints = vec![[0.0_f64; 2]];
        let mut pt = [0.0, 0.0];
        for (qi, li) in q.iter().zip(links) {
            a += qi;
            pt[0] += li * scale * a.cos();
            pt[1] += li * scale * a.sin();
            joints.push(pt);
        }
        for j in 0..n {
            // column j: cross(z, p_ee - p_joint_j)
            jx[j] = -(p[1] - joints[j][1]);
            jy[j] = p[0] - joints[j][0];
        }
        // dq = J^T (J J^T + lambda^2 I)^{-1} e  (2x2 inverse, closed form)
        let a11 = jx.iter().map(|v| v * v).sum::<f64>() + lambda * lambda;
        let a12 = jx.iter().zip(&jy).map(|(x, y)| x * y).sum::<f64>();
        let a22 = jy.iter().map(|v| v * v).sum::<f64>() + lambda * lambda;
        let det = a11 * a22 - a12 * a12;
        let wx = (a22 * ex - a12 * ey) / det;
        let wy = (-a12 * ex + a11 * ey) / det;
        for j in 0..n {
            q[j] += jx[j] * wx + jy[j] * wy;
        }
    }
    (q, err)
}

/// Clamps a goal point into the reachable disc; under strong perturbations
/// objects may drift out of reach and the expert then aims as close as it
/// can.
fn clamp_reachable(p: [f64; 2], reach: f64) -> [f64; 2] {
    let d = (p[0] * p[0] + p[1] * p[1]).sqrt();
    if d <= reach {
        p
    } else {
        [p[0] * reach / d, p[1] * reach / d]
    }
}

/// Scripted expert: proportional control toward the analytic subgoal
/// sequence. Returns an absolute position-target action.
pub fn expert_action(state: &SimState) -> Result<Vec<f64>> {
    let task = &state.task;
    match (task.embodiment, task.goal.clone()) {
        (ToyEmbodiment::Reacher2, Goal::ReachTarget { target }) => {
            let links = [
                REACHER_LINKS[0] * state.link_scale,
                REACHER_LINKS[1] * state.link_scale,
            ];
            let goal = clamp_reachable(state.obj_pos[target], (links[0] + links[1]) * 0.999);
            let q = ik_two_link(goal, links, &state.q)?;
            Ok(q.to_vec())
        }
        (ToyEmbodiment::Pusher3, Goal::PushToZone { block, zone }) => {
            let goal = if dist(state.ee(), state.obj_pos[block]) > CONTACT_RADIUS {
                state.obj_pos[block]
            } else {
                state.obj_pos[zone]
            };
            let reach = PUSHER_LINKS.iter().sum::<f64>() * state.link_scale * 0.999;
            ik_chain(
                clamp_reachable(goal, reach),
                &PUSHER_LINKS,
                state.link_scale,
                &state.q,
            )
        }
        (ToyEmbodiment::Gripper4, Goal::PlaceAtCell { block, row, col }) => {
            let ee = state.ee();
            let cell = super::grid_cell_center(row, col);
            let a = if state.grasped.is_some() {
                if dist(ee, cell) > 0.02 {
                    [cell[0], cell[1], 0.0, 1.0]
                } else {
                    [cell[0], cell[1], 0.0, 0.0] // release
                }
            } else if state.success {
                [ee[0], ee[1], 0.0, 0.0]
            } else {
                let b = state.obj_pos[block];
                if dist(ee, b) > 0.02 {
                    [b[0], b[1], 0.0, 0.0]
                } else {
                    [b[0], b[1], 0.0, 1.0] // close
                }
            };
            Ok(a.to_vec())
        }
        (ToyEmbodiment::DualArm8, Goal::ReachPair { a, b }) => {
            let pa = state.obj_pos[a];
            let pb = state.obj_pos[b];
            Ok(vec![pa[0], pa[1], 0.0, 0.0, pb[0], pb[1], 0.0, 0.0])
        }
        _ => Err(Error::UnknownTaskFamily(task.family.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envbench::sample_task;

    fn rollout_expert(family: &str, seed: u64) -> (bool, f64, usize) {
        let task = sample_task(family, seed).unwrap();
        let (mut state, _) = reset(&task, seed, &PerturbationConfig::off(), 16);
        let mut progress_trace = Vec::new();
        loop {
            let a = expert_action(&state).unwrap();
            let out = step(&mut state, &a);
            progress_trace.push(out.progress);
            if out.done {
                // monotone progress
                for w in progress_trace.windows(2) {
                    assert!(w[1] >= w[0]);
                }
                return (out.success, out.progress, state.step);
            }
        }
    }

    #[test]
    fn experts_succeed_on_all_embodiments() {
        for fam in [
            "reacher2/reach_color",
            "pusher3/push_block",
            "gripper4/grid_place",
            "dualarm8/reach_pair",
        ] {
            let mut ok = 0;
            for seed in 0..50u64 {
                let (success, progress, _) = rollout_expert(fam, seed);
                if success {
                    assert_eq!(progress, 1.0);
                    ok += 1;
                }
            }
            assert_eq!(ok, 50, "{fam}: {ok}/50 expert successes");
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let task = sample_task("pusher3/push_block", 3).unwrap();
        let (_, o1) = reset(&task, 9, &PerturbationConfig::off(), 16);
        let (_, o2) = reset(&task, 9, &PerturbationConfig::off(), 16);
        assert_eq!(o1.frames[0].pixels, o2.frames[0].pixels);
    }

    #[test]
    fn zero_delta_action_keeps_state() {
        let task = sample_task("reacher2/reach_color", 1).unwrap();
        let (mut state, _) = reset(&task, 1, &PerturbationConfig::off(), 16);
        let q0 = state.q.clone();
        step(&mut state, &q0.clone());
        assert_eq!(state.q, q0);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn out_of_bounds_actions_are_clipped_and_counted() {
        let task = sample_task("reacher2/reach_color", 1).unwrap();
        let (mut state, _) = reset(&task, 1, &PerturbationConfig::off(), 16);
        step(&mut state, &[100.0, -100.0]);
        assert_eq!(state.clip_count, 1);
        assert!(state.q.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn expert_at_goal_is_near_zero_delta() {
        let task = sample_task("reacher2/reach_color", 7).unwrap();
        let (mut state, _) = reset(&task, 7, &PerturbationConfig::off(), 16);
        loop {
            let a = expert_action(&state).unwrap();
            if step(&mut state, &a).done {
                break;
            }
        }
        let a = expert_action(&state).unwrap();
        let delta: f64 = a
            .iter()
            .zip(&state.q)
            .map(|(t, q)| (t - q).abs())
            .sum();
        assert!(delta < 0.15, "delta={delta}");
    }

    #[test]
    fn ik_failure_on_unreachable_target() {
        assert!(matches!(
            ik_two_link([5.0, 5.0], REACHER_LINKS, &[0.0, 0.0]).unwrap_err(),
            Error::IkFailure(_)
        ));
        assert!(matches!(
            ik_chain([5.0, 5.0], &PUSHER_LINKS, 1.0, &[0.0, 0.0, 0.0]).unwrap_err(),
            Error::IkFailure(_)
        ));
    }

    #[test]
    fn expert_retains_success_under_mild_perturbations() {
        let mut ok = 0;
        for seed in 0..30u64 {
            let task = sample_task("reacher2/reach_color", seed).unwrap();
            let (mut state, _) = reset(&task, seed, &PerturbationConfig::mild(), 16);
            loop {
                let a = expert_action(&state).unwrap();
                let out = step(&mut state, &a);
                if out.done {
                    if out.success {
                        ok += 1;
                    }
                    break;
                }
            }
        }
        assert!(ok >= 27, "{ok}/30 under mild perturbations");
    }
}
