//! Value heatmaps over ego position: each pixel holds the smallest feasible
//! budget `z*` for a fixed scene, or a sentinel where no budget is feasible.

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::dynamics::{AgentState, GoalSpec, Observation, Slot, SwarmSystem};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::nn::{aux_value, ValueModel};
use crate::policy::{z_search, PolicyConfig, ZSearch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneNeighbour {
    /// `[px, py, vx, vy]`
    pub state: [f64; 4],
    pub goal: [f64; 2],
}

/// Everything except the ego position, which the heatmap sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub t: f64,
    #[serde(default)]
    pub ego_velocity: [f64; 2],
    pub ego_goal: [f64; 2],
    #[serde(default)]
    pub neighbours: Vec<SceneNeighbour>,
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad scene: {}", e.message())))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(format!("scene file {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    /// Observation with the ego at `(x, y)`; missing neighbour slots are padded.
    pub fn observation(&self, sys: &SwarmSystem, x: f64, y: f64) -> Result<Observation> {
        if self.neighbours.len() > sys.n_neighbours {
            return Err(Error::Validation(format!(
                "scene has {} neighbours, the model observes {}",
                self.neighbours.len(),
                sys.n_neighbours
            )));
        }
        let mut slots = vec![Slot::real(
            AgentState::new(x, y, self.ego_velocity[0], self.ego_velocity[1]),
            GoalSpec::new(self.ego_goal[0], self.ego_goal[1]),
        )];
        for nb in &self.neighbours {
            slots.push(Slot::real(AgentState::from_array(nb.state), GoalSpec::new(nb.goal[0], nb.goal[1])));
        }
        while slots.len() < sys.slots() {
            slots.push(Slot::virtual_slot(&sys.limits));
        }
        Observation::new(slots)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `(x, y, value)` with `y` outer and `x` inner, both ascending.
    pub pixels: Vec<(f64, f64, f64)>,
    pub sentinel: f64,
}

impl Heatmap {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["x", "y", "value"])?;
        for &(x, y, v) in &self.pixels {
            w.write_record([fmt_f64(x), fmt_f64(y), fmt_f64(v)])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn min_pixel(&self) -> Option<(f64, f64, f64)> {
        self.pixels.iter().copied().min_by(|a, b| a.2.total_cmp(&b.2))
    }
}

/// Sweep the ego over a `res x res` lattice spanning the arena, endpoints
/// included. Infeasible pixels get `2 * z_max`.
pub fn emit_heatmap(model: &ValueModel, sys: &SwarmSystem, scene: &SceneSpec, res: usize, policy: &PolicyConfig) -> Result<Heatmap> {
    if res < 2 {
        return Err(Error::Validation(format!("heatmap resolution must be at least 2, got {res}")));
    }
    let hw = sys.limits.half_width;
    let coord = |i: usize| -hw + 2.0 * hw * i as f64 / (res - 1) as f64;
    let sentinel = 2.0 * sys.z_max;
    let rows: Vec<Vec<(f64, f64, f64)>> = (0..res)
        .into_par_iter()
        .map(|iy| {
            let y = coord(iy);
            (0..res)
                .map(|ix| {
                    let x = coord(ix);
                    let state = scene.observation(sys, x, y)?.flatten();
                    let found = z_search(
                        |z| aux_value(model, sys, scene.t, &state, z),
                        sys.z_max,
                        policy.tol_fraction * sys.z_max,
                        policy.max_iter,
                    )?;
                    let v = match found {
                        ZSearch::Feasible { z, .. } => z,
                        ZSearch::Infeasible => sentinel,
                    };
                    Ok((x, y, v))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(Heatmap {
        pixels: rows.into_iter().flatten().collect(),
        sentinel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Limits;
    use crate::epigraph::EpigraphProblem;
    use crate::train::init_model;

    fn setup() -> (SwarmSystem, ValueModel) {
        let sys = SwarmSystem::new(Limits::default(), 0.1, 2, 0.2);
        let p = EpigraphProblem::new(sys.clone(), 0.2).unwrap();
        (sys, init_model(&p, &[8], 30.0, 1).unwrap())
    }

    #[test]
    fn terminal_time_heatmap_has_closed_form() {
        // At t = T the value is max(phi - z, g), so z* = phi wherever g <= 0
        // and the search is infeasible where g > 0.
        let (sys, m) = setup();
        let scene = SceneSpec {
            t: 0.2,
            ego_velocity: [0.0, 0.0],
            ego_goal: [0.5, 0.5],
            neighbours: vec![SceneNeighbour {
                state: [-0.5, -0.5, 0.0, 0.0],
                goal: [-0.5, -0.5],
            }],
        };
        let h = emit_heatmap(&m, &sys, &scene, 5, &PolicyConfig::default()).unwrap();
        assert_eq!(h.pixels.len(), 25);
        let tol = 1e-4 * sys.z_max;
        for &(x, y, v) in &h.pixels {
            let d_goal = (x - 0.5f64).hypot(y - 0.5);
            if (x + 0.5f64).hypot(y + 0.5) <= 0.1 {
                assert_eq!(v, h.sentinel);
            } else {
                assert!(v >= d_goal - 1e-12 && v <= d_goal + tol, "({x}, {y}): {v} vs {d_goal}");
            }
        }
        let (x, y, _) = h.min_pixel().unwrap();
        assert_eq!((x, y), (0.5, 0.5));
    }

    #[test]
    fn csv_has_one_row_per_pixel() {
        let (sys, m) = setup();
        let scene = SceneSpec::from_toml("ego_goal = [0.0, 0.0]").unwrap();
        let h = emit_heatmap(&m, &sys, &scene, 50, &PolicyConfig::default()).unwrap();
        let csv = String::from_utf8(h.to_csv().unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 2501);
        assert!(csv.starts_with("x,y,value\n"));
    }

    #[test]
    fn scene_validation() {
        let (sys, m) = setup();
        let nb = SceneNeighbour {
            state: [0.0; 4],
            goal: [0.0; 2],
        };
        let scene = SceneSpec {
            t: 0.0,
            ego_velocity: [0.0; 2],
            ego_goal: [0.0; 2],
            neighbours: vec![nb.clone(), nb.clone(), nb],
        };
        assert!(emit_heatmap(&m, &sys, &scene, 4, &PolicyConfig::default()).is_err());
        assert!(SceneSpec::from_toml("ego_goal = [0.0, 0.0]\nextra = 1").is_err());
    }
}
