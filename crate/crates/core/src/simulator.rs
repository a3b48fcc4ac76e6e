//! Synthetic interacting-particle trajectories: two fixed-velocity
//! particles and one randomly moving particle that is pushed away whenever
//! it comes within the interaction radius of the others. Reflective arena
//! walls; semi-implicit Euler integration.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_stats, Dataset, DatasetSource, Geometry, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Particle count; the last particle is the randomly moving one.
    pub particles: usize,
    /// Arena is the square [-box_half_width, box_half_width]^2.
    pub box_half_width: f64,
    /// Integration step in seconds.
    pub dt: f64,
    /// Repulsion strength on the random particle.
    pub repulsion_gain: f64,
    /// Pairwise distance below which repulsion acts.
    pub interaction_radius: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Frames per rollout (input_len + pred_len).
    pub steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            particles: 3,
            box_half_width: 5.0,
            dt: 0.1,
            repulsion_gain: 5.0,
            interaction_radius: 1.0,
            speed_min: 0.2,
            speed_max: 1.0,
            steps: 35,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 1 {
            return Err(Error::Config(
                "simulator needs at least one particle".into(),
            ));
        }
        if self.dt <= 0.0 || self.interaction_radius <= 0.0 || self.box_half_width <= 0.0 {
            return Err(Error::Config("simulator rates must be positive".into()));
        }
        if self.speed_min <= 0.0 || self.speed_max < self.speed_min {
            return Err(Error::Config(
                "speed range must satisfy 0 < min <= max".into(),
            ));
        }
        Ok(())
    }
}

/// Per-particle (x, y, vx, vy).
pub type State = Vec<[f64; 4]>;

/// Advance one step: repulsion acts only on the last particle, everything
/// integrates semi-implicitly, walls reflect.
pub fn step_dynamics(state: &State, cfg: &SimConfig) -> State {
    let n = state.len();
    let mut next = state.clone();
    let free = n - 1; // index of the randomly moving particle

    // repulsion from close neighbors, linear ramp inside the radius
    let mut acc = [0.0f64; 2];
    for (j, other) in state.iter().enumerate().take(free) {
        let dx = state[free][0] - other[0];
        let dy = state[free][1] - other[1];
        let d = (dx * dx + dy * dy).sqrt();
        if d < cfg.interaction_radius {
            let d_safe = d.max(1e-6);
            let gain = cfg.repulsion_gain * (1.0 - d / cfg.interaction_radius);
            acc[0] += gain * dx / d_safe;
            acc[1] += gain * dy / d_safe;
        }
        let _ = j;
    }
    next[free][2] += acc[0] * cfg.dt;
    next[free][3] += acc[1] * cfg.dt;

    for p in next.iter_mut() {
        p[0] += p[2] * cfg.dt;
        p[1] += p[3] * cfg.dt;
        // reflective walls: clamp position, negate the violating component
        for axis in 0..2 {
            if p[axis] > cfg.box_half_width {
                p[axis] = cfg.box_half_width;
                p[axis + 2] = -p[axis + 2];
            } else if p[axis] < -cfg.box_half_width {
                p[axis] = -cfg.box_half_width;
                p[axis + 2] = -p[axis + 2];
            }
        }
    }
    next
}

fn initial_state(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> State {
    let pos_range = cfg.box_half_width * 0.5;
    (0..cfg.particles)
        .map(|_| {
            let x = rng.gen_range(-pos_range..pos_range);
            let y = rng.gen_range(-pos_range..pos_range);
            let speed = rng.gen_range(cfg.speed_min..cfg.speed_max);
            let heading = rng.gen_range(0.0..std::f64::consts::TAU);
            [x, y, speed * heading.cos(), speed * heading.sin()]
        })
        .collect()
}

/// One seeded rollout of `cfg.steps` frames, flattened [t][n][(x,y,vx,vy)].
pub fn rollout(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Sample {
    let mut state = initial_state(cfg, rng);
    let mut frames = Vec::with_capacity(cfg.steps * cfg.particles * 4);
    for _ in 0..cfg.steps {
        for p in &state {
            frames.extend_from_slice(p);
        }
        state = step_dynamics(&state, cfg);
    }
    Sample { frames }
}

/// Generate a complete dataset: independent seeded rollouts split into
/// train/val/test, with normalization stats from the training split.
pub fn generate_dataset(
    cfg: &SimConfig,
    input_len: usize,
    pred_len: usize,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    if n_train < 1 || n_val < 1 || n_test < 1 {
        return Err(Error::Config("split sizes must be >= 1".into()));
    }
    if cfg.steps != input_len + pred_len {
        return Err(Error::Config(format!(
            "simulator steps {} must equal input_len + pred_len = {}",
            cfg.steps,
            input_len + pred_len
        )));
    }
    let geometry = Geometry {
        input_len,
        pred_len,
        entities: cfg.particles,
        features: 4,
    };
    let make = |count: usize, stream: u64| -> Vec<Sample> {
        (0..count)
            .map(|i| {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                    seed ^ (stream << 56) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                rollout(cfg, &mut rng)
            })
            .collect()
    };
    let train = make(n_train, 1);
    let val = make(n_val, 2);
    let test = make(n_test, 3);
    let scales = normalize_stats(&train, &geometry);
    Ok(Dataset {
        geometry,
        scales,
        metric_dims: vec![0, 1],
        train,
        val,
        test,
        source: DatasetSource::Simulation { config: *cfg },
    })
}

use rand::SeedableRng;
