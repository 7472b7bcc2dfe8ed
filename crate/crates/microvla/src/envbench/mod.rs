//! Self-contained planar multi-embodiment benchmark: four kinematic
//! embodiments, templated language tasks from a seeded generator, a flat-2D
//! renderer with a seven-axis perturbation suite, scripted experts, and the
//! evaluation protocol (success rate + progress score).
//!
//! World coordinates live in [-1, 1]^2; frames are square RGB rasters.

mod eval;
mod render;
mod sim;

pub use eval::{
    evaluate, generate_dataset, write_report_csv, DatasetRegime, EvalConfig, EvalReport,
    ExpertPolicy, Policy, RandomPolicy, TRAIN_SEED_LIMIT,
};
pub use render::{render, PerturbationConfig};
pub use sim::{expert_action, reset, step, SimState, StepOut};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::EmbodimentSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ToyEmbodiment {
    /// 2-DOF planar arm; action = joint position targets.
    Reacher2,
    /// 3-DOF planar arm pushing a block; action = joint position targets.
    Pusher3,
    /// Planar gripper: x, y, wrist, open/close.
    Gripper4,
    /// Two planar grippers: 2 x (x, y, wrist, open/close).
    DualArm8,
}

impl ToyEmbodiment {
    pub fn all() -> [ToyEmbodiment; 4] {
        [
            ToyEmbodiment::Reacher2,
            ToyEmbodiment::Pusher3,
            ToyEmbodiment::Gripper4,
            ToyEmbodiment::DualArm8,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            ToyEmbodiment::Reacher2 => "reacher2",
            ToyEmbodiment::Pusher3 => "pusher3",
            ToyEmbodiment::Gripper4 => "gripper4",
            ToyEmbodiment::DualArm8 => "dualarm8",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reacher2" => Ok(ToyEmbodiment::Reacher2),
            "pusher3" => Ok(ToyEmbodiment::Pusher3),
            "gripper4" => Ok(ToyEmbodiment::Gripper4),
            "dualarm8" => Ok(ToyEmbodiment::DualArm8),
            other => Err(Error::UnknownEmbodiment(other.to_string())),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            ToyEmbodiment::Reacher2 => 2,
            ToyEmbodiment::Pusher3 => 3,
            ToyEmbodiment::Gripper4 => 4,
            ToyEmbodiment::DualArm8 => 8,
        }
    }

    /// Canonical task family id of this embodiment.
    pub fn task_family(&self) -> &'static str {
        match self {
            ToyEmbodiment::Reacher2 => "reacher2/reach_color",
            ToyEmbodiment::Pusher3 => "pusher3/push_block",
            ToyEmbodiment::Gripper4 => "gripper4/grid_place",
            ToyEmbodiment::DualArm8 => "dualarm8/reach_pair",
        }
    }

    pub fn spec(&self) -> EmbodimentSpec {
        use std::f64::consts::PI;
        let (low, high): (Vec<f64>, Vec<f64>) = match self {
            ToyEmbodiment::Reacher2 => (vec![-PI; 2], vec![PI; 2]),
            ToyEmbodiment::Pusher3 => (vec![-PI; 3], vec![PI; 3]),
            ToyEmbodiment::Gripper4 => (vec![-1.0, -1.0, -PI, 0.0], vec![1.0, 1.0, PI, 1.0]),
            ToyEmbodiment::DualArm8 => (
                vec![-1.0, -1.0, -PI, 0.0, -1.0, -1.0, -PI, 0.0],
                vec![1.0, 1.0, PI, 1.0, 1.0, 1.0, PI, 1.0],
            ),
        };
        let d = self.action_dim();
        EmbodimentSpec::new(self.name(), d, d, low, high)
    }

    pub fn horizon(&self) -> usize {
        match self {
            ToyEmbodiment::Reacher2 => 40,
            ToyEmbodiment::Pusher3 => 70,
            ToyEmbodiment::Gripper4 => 70,
            ToyEmbodiment::DualArm8 => 40,
        }
    }
}

/// Arm geometry shared by simulation and rendering.
pub const REACHER_LINKS: [f64; 2] = [0.5, 0.4];
pub const PUSHER_LINKS: [f64; 3] = [0.45, 0.35, 0.2];

pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 50, 40]),
    ("green", [50, 180, 70]),
    ("blue", [50, 90, 220]),
    ("yellow", [230, 200, 40]),
    ("purple", [150, 60, 200]),
    ("orange", [240, 140, 30]),
];

pub fn color_rgb(name: &str) -> [u8; 3] {
    COLORS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .unwrap_or([127, 127, 127])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    /// Filled square that can be pushed or carried.
    Block,
    /// Filled disc reach goal.
    Target,
    /// Larger outlined square region.
    Zone,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub color: String,
    pub pos: [f64; 2],
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

/// The goal a task's instruction denotes, by object index into the scene.
#[derive(Debug, Clone, PartialEq)]
pub enum Goal {
    /// End-effector within radius of the target.
    ReachTarget { target: usize },
    /// Block center within radius of the zone center.
    PushToZone { block: usize, zone: usize },
    /// Block grasped, carried to the cell, and released there.
    PlaceAtCell { block: usize, row: usize, col: usize },
    /// Left arm at target a and right arm at target b simultaneously.
    ReachPair { a: usize, b: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub embodiment: ToyEmbodiment,
    pub family: String,
    pub scene: Scene,
    pub instruction: String,
    pub horizon: usize,
    pub goal: Goal,
    /// Success radius of the goal predicate.
    pub radius: f64,
}

/// 3x3 grid used by `gripper4/grid_place`: cell centers over [-0.6, 0.6].
pub fn grid_cell_center(row: usize, col: usize) -> [f64; 2] {
    [-0.6 + col as f64 * 0.6, 0.6 - row as f64 * 0.6]
}

fn place_apart(rng: &mut ChaCha8Rng, taken: &[[f64; 2]], lo: f64, hi: f64, sep: f64) -> [f64; 2] {
    for _ in 0..1000 {
        let p = [rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        if taken
            .iter()
            .all(|t| ((t[0] - p[0]).powi(2) + (t[1] - p[1]).powi(2)).sqrt() >= sep)
        {
            return p;
        }
    }
    // extremely unlikely with our densities; fall back to the last draw
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// Reachable annulus placement for arm-based embodiments.
fn place_reachable(
    rng: &mut ChaCha8Rng,
    taken: &[[f64; 2]],
    r_min: f64,
    r_max: f64,
    sep: f64,
) -> [f64; 2] {
    for _ in 0..1000 {
        let r = rng.gen_range(r_min..r_max);
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let p = [r * a.cos(), r * a.sin()];
        if taken
            .iter()
            .all(|t| ((t[0] - p[0]).powi(2) + (t[1] - p[1]).powi(2)).sqrt() >= sep)
        {
            return p;
        }
    }
    [r_min, 0.0]
}

/// Deterministic task generator: `(family, seed)` fully determines the scene
/// and instruction, and the instruction uniquely identifies the goal.
pub fn sample_task(family: &str, seed: u64) -> Result<TaskInstance> {
    let emb = match family {
        "reacher2/reach_color" => ToyEmbodiment::Reacher2,
        "pusher3/push_block" => ToyEmbodiment::Pusher3,
        "gripper4/grid_place" => ToyEmbodiment::Gripper4,
        "dualarm8/reach_pair" => ToyEmbodiment::DualArm8,
        other => return Err(Error::UnknownTaskFamily(other.to_string())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5e_b37c);
    let mut colors: Vec<&str> = COLORS.iter().map(|(n, _)| *n).collect();
    // deterministic shuffle to assign distinct colors
    for i in (1..colors.len()).rev() {
        let j = rng.gen_range(0..=i);
        colors.swap(i, j);
    }

    let mut scene = Scene::default();
    let mut taken: Vec<[f64; 2]> = Vec::new();
    let (goal, instruction, radius) = match emb {
        ToyEmbodiment::Reacher2 => {
            let reach = REACHER_LINKS.iter().sum::<f64>();
            for c in colors.iter().take(3) {
                let p = place_reachable(&mut rng, &taken, 0.3, reach - 0.08, 0.3);
                taken.push(p);
                scene.objects.push(SceneObject {
                    kind: ObjectKind::Target,
                    color: (*c).into(),
                    pos: p,
                    size: 0.07,
                });
            }
            let target = rng.gen_range(0..3usize);
            let instr = format!("reach the {} target", scene.objects[target].color);
            // Sized to roughly one rendered pixel at the default training
            // resolution, so the goal is resolvable from the image alone.
            (Goal::ReachTarget { target }, instr, 0.09)
        }
        ToyEmbodiment::Pusher3 => {
            let reach = PUSHER_LINKS.iter().sum::<f64>();
            let zone = place_reachable(&mut rng, &taken, 0.35, reach - 0.15, 0.3);
            taken.push(zone);
            let block = place_reachable(&mut rng, &taken, 0.3, reach - 0.2, 0.35);
            taken.push(block);
            scene.objects.push(SceneObject {
                kind: ObjectKind::Zone,
                color: colors[0].into(),
                pos: zone,
                size: 0.16,
            });
            scene.objects.push(SceneObject {
                kind: ObjectKind::Block,
                color: colors[1].into(),
                pos: block,
                size: 0.07,
            });
            let instr = format!(
                "push the {} block into the {} zone",
                colors[1], colors[0]
            );
            (Goal::PushToZone { block: 1, zone: 0 }, instr, 0.11)
        }
        ToyEmbodiment::Gripper4 => {
            let (row, col) = (rng.gen_range(0..3usize), rng.gen_range(0..3usize));
            let cell = grid_cell_center(row, col);
            taken.push(cell);
            for c in colors.iter().take(2) {
                let p = place_apart(&mut rng, &taken, -0.8, 0.8, 0.3);
                taken.push(p);
                scene.objects.push(SceneObject {
                    kind: ObjectKind::Block,
                    color: (*c).into(),
                    pos: p,
                    size: 0.07,
                });
            }
            let instr = format!(
                "place the {} block at row {}, column {}",
                colors[0],
                row + 1,
                col + 1
            );
            (Goal::PlaceAtCell { block: 0, row, col }, instr, 0.1)
        }
        ToyEmbodiment::DualArm8 => {
            for c in colors.iter().take(2) {
                let p = place_apart(&mut rng, &taken, -0.8, 0.8, 0.35);
                taken.push(p);
                scene.objects.push(SceneObject {
                    kind: ObjectKind::Target,
                    color: (*c).into(),
                    pos: p,
                    size: 0.07,
                });
            }
            let instr = format!(
                "reach the {} target with the left arm and the {} target with the right arm",
                colors[0], colors[1]
            );
            (Goal::ReachPair { a: 0, b: 1 }, instr, 0.08)
        }
    };

    Ok(TaskInstance {
        embodiment: emb,
        family: family.to_string(),
        scene,
        instruction,
        horizon: emb.horizon(),
        goal,
        radius,
    })
}

fn coarse_position(p: [f64; 2]) -> String {
    let vert = if p[1] > 0.33 {
        "upper"
    } else if p[1] < -0.33 {
        "lower"
    } else {
        "center"
    };
    let horiz = if p[0] < -0.33 {
        "left"
    } else if p[0] > 0.33 {
        "right"
    } else {
        "center"
    };
    match (vert, horiz) {
        ("center", "center") => "center".into(),
        ("center", h) => format!("center {h}"),
        (v, "center") => format!("{v} center"),
        (v, h) => format!("{v} {h}"),
    }
}

/// Deterministic templated caption of a scene, for caption pretraining.
pub fn describe_scene(scene: &Scene) -> String {
    if scene.objects.is_empty() {
        return "an empty table".into();
    }
    let mut parts: Vec<String> = Vec::with_capacity(scene.objects.len() + 1);
    for o in &scene.objects {
        let kind = match o.kind {
            ObjectKind::Block => "block",
            ObjectKind::Target => "target",
            ObjectKind::Zone => "zone",
        };
        parts.push(format!("a {} {} at {}", o.color, kind, coarse_position(o.pos)));
    }
    parts.push("arm at center".into());
    parts.join("; ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_generation_is_deterministic() {
        for fam in [
            "reacher2/reach_color",
            "pusher3/push_block",
            "gripper4/grid_place",
            "dualarm8/reach_pair",
        ] {
            assert_eq!(sample_task(fam, 5).unwrap(), sample_task(fam, 5).unwrap());
        }
    }

    #[test]
    fn different_seeds_move_objects() {
        let mut distinct = 0;
        for s in 0..100u64 {
            let a = sample_task("reacher2/reach_color", s).unwrap();
            let b = sample_task("reacher2/reach_color", s + 1).unwrap();
            if a.scene.objects[0].pos != b.scene.objects[0].pos {
                distinct += 1;
            }
        }
        assert!(distinct >= 99);
    }

    #[test]
    fn placement_is_collision_free() {
        for s in 0..100u64 {
            let t = sample_task("reacher2/reach_color", s).unwrap();
            for i in 0..t.scene.objects.len() {
                for j in i + 1..t.scene.objects.len() {
                    let a = t.scene.objects[i].pos;
                    let b = t.scene.objects[j].pos;
                    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                    assert!(d >= 0.3, "seed {s}: objects {i},{j} at distance {d}");
                }
            }
        }
    }

    #[test]
    fn unknown_family_rejected() {
        assert!(matches!(
            sample_task("quadruped/walk", 0).unwrap_err(),
            Error::UnknownTaskFamily(_)
        ));
    }

    #[test]
    fn instruction_identifies_goal_color() {
        for s in 0..20u64 {
            let t = sample_task("reacher2/reach_color", s).unwrap();
            let Goal::ReachTarget { target } = &t.goal else {
                panic!("wrong goal kind")
            };
            let color = &t.scene.objects[*target].color;
            assert!(t.instruction.contains(color.as_str()));
            // no other target shares the color
            for (i, o) in t.scene.objects.iter().enumerate() {
                if i != *target {
                    assert_ne!(&o.color, color);
                }
            }
        }
    }

    #[test]
    fn captions_are_deterministic_and_templated() {
        assert_eq!(describe_scene(&Scene::default()), "an empty table");
        let scene = Scene {
            objects: vec![SceneObject {
                kind: ObjectKind::Block,
                color: "red".into(),
                pos: [-0.7, 0.7],
                size: 0.07,
            }],
        };
        let c = describe_scene(&scene);
        assert!(c.contains("red") && c.contains("upper left"), "{c}");
        assert_eq!(c, describe_scene(&scene));
    }

    #[test]
    fn specs_are_consistent() {
        for e in ToyEmbodiment::all() {
            let s = e.spec();
            assert_eq!(s.action_dim, e.action_dim());
            assert_eq!(ToyEmbodiment::parse(e.name()).unwrap(), e);
        }
    }
}
