//! Result documents: JSON (versioned) and the flat CSV table.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use oplq::{AdaptedProcess, RandomVector, ScenarioTree};

pub const RESULT_SCHEMA_VERSION: u32 = 1;

/// f64 that may be infinite or NaN; those are written as the strings "inf", "-inf", "nan".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_finite() {
            s.serialize_f64(v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            F(f64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::F(v) => Ok(Num(v)),
            Raw::S(s) => match s.as_str() {
                "inf" => Ok(Num(f64::INFINITY)),
                "-inf" => Ok(Num(f64::NEG_INFINITY)),
                "nan" => Ok(Num(f64::NAN)),
                other => Err(serde::de::Error::custom(format!("invalid number {other:?}"))),
            },
        }
    }
}

/// Adapted process as levels[level − start][node][component].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessOut {
    pub start: usize,
    pub levels: Vec<Vec<Vec<f64>>>,
}

impl ProcessOut {
    pub fn of(p: &AdaptedProcess) -> Self {
        ProcessOut {
            start: p.start,
            levels: p.entries.iter().map(|e| (0..e.nodes()).map(|k| e.node(k).to_vec()).collect()).collect(),
        }
    }

    pub fn to_process(&self, tree: &ScenarioTree) -> Result<AdaptedProcess, String> {
        let mut entries = Vec::new();
        let mut dim = None;
        for (i, level) in self.levels.iter().enumerate() {
            let j = self.start + i;
            if j > tree.n_steps() || level.len() != tree.level_size(j) {
                return Err(format!("process level {j} does not match the tree"));
            }
            let mut values = Vec::new();
            for node in level {
                if dim.is_some_and(|d| d != node.len()) {
                    return Err("process rows differ in length".into());
                }
                dim = Some(node.len());
                values.extend_from_slice(node);
            }
            entries.push(RandomVector::from_values(j, dim.unwrap_or(0), values));
        }
        AdaptedProcess::new(self.start, entries).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionOut {
    pub name: String,
    pub level: Option<usize>,
    pub value: Num,
    pub threshold: Num,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionsOut {
    pub passed: bool,
    pub delta: f64,
    pub stacked_ok: bool,
    pub conditions: Vec<ConditionOut>,
    /// failed clauses, (H3) ones prefixed accordingly
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub forward: f64,
    pub backward: f64,
    pub terminal: f64,
    pub stationarity_residual_norm: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumOut {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub convex: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOut {
    pub alpha_from: f64,
    pub step: f64,
    pub iterations: usize,
    pub ratio: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    /// ‖u_fbsde − u_qf‖ / ‖u_qf‖ in the adapted L² norm
    pub quadform_control_rel_diff: f64,
    pub quadform_value_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionOut {
    pub alpha: f64,
    pub control: ProcessOut,
    pub state: ProcessOut,
    pub y: ProcessOut,
    pub z: ProcessOut,
    pub residuals: Residuals,
    pub spectrum: SpectrumOut,
    pub continuation: Vec<StageOut>,
    pub cross_validation: CrossValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FredholmOut {
    pub level: usize,
    pub kernel_spectral_radius: f64,
    pub resolvent_identity_residual: f64,
    /// max |u_fredholm − u_fbsde|
    pub fredholm_vs_fbsde: f64,
    /// max |u_resolvent − u_fbsde|
    pub resolvent_vs_fbsde: f64,
    pub control: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformOut {
    pub stationarity: f64,
    pub backward: f64,
    pub terminal: f64,
    pub reduced: f64,
    pub adjoint_match: f64,
    pub value: f64,
    pub value_equivalent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanVarianceOut {
    pub route: String,
    pub k: f64,
    pub h: Vec<f64>,
    pub equivalence_constant: f64,
    pub portfolio: ProcessOut,
    pub wealth: ProcessOut,
    /// adjoint pair of the equivalent problem
    pub y: ProcessOut,
    pub z: ProcessOut,
    pub transform: TransformOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOut {
    pub name: String,
    pub value: Num,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDoc {
    pub schema_version: u32,
    pub command: String,
    /// "ok", "assumptions_failed" or "validation_failed"
    pub status: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assumptions: Option<AssumptionsOut>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<SolutionOut>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fredholm: Option<Vec<FredholmOut>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_variance: Option<MeanVarianceOut>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<Vec<CheckOut>>,
}

impl ResultDoc {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("result documents serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Control, state, Y and Z over the control span, one row per node.
    pub fn to_csv(&self) -> Result<String, String> {
        let (u, x, y, z) = if let Some(s) = &self.solution {
            (&s.control, &s.state, &s.y, &s.z)
        } else if let Some(mv) = &self.mean_variance {
            (&mv.portfolio, &mv.wealth, &mv.y, &mv.z)
        } else {
            return Err(format!("`{}` produces no control table; use --format json", self.command));
        };
        let dim = |p: &ProcessOut| p.levels.first().and_then(|l| l.first()).map(|v| v.len()).unwrap_or(0);
        let mut header = vec!["level".to_string(), "node".to_string()];
        for (name, p) in [("u", u), ("x", x), ("y", y), ("z", z)] {
            header.extend((0..dim(p)).map(|i| format!("{name}{i}")));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header).map_err(|e| e.to_string())?;
        for (i, level) in u.levels.iter().enumerate() {
            let j = u.start + i;
            for k in 0..level.len() {
                let mut row = vec![j.to_string(), k.to_string()];
                for p in [u, x, y, z] {
                    let v = &p.levels[j - p.start][k];
                    row.extend(v.iter().map(|f| f.to_string()));
                }
                w.write_record(&row).map_err(|e| e.to_string())?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| e.to_string())?).map_err(|e| e.to_string())
    }
}
