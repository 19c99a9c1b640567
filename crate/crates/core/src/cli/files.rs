//! JSON documents read and written by the command-line tool.
//!
//! Matrices are row-major nested arrays and subsystem indices are
//! one-based. Floats are written in shortest round-trip form, so a value
//! read back is bit-identical to the value written.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{validate_network, CascadeNetwork, Matrix, Subsystem};
use crate::protocol::{DesignRecord, NetworkDesignState, Route};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("unsupported schema {found}, expected {SCHEMA}")]
    Schema { found: u32 },
    #[error("{0}")]
    Content(String),
    #[error("network fingerprint mismatch: state file has {stored}, network hashes to {actual}")]
    Fingerprint { stored: String, actual: String },
}

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &Matrix) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &Rows, what: &str) -> Result<Matrix, FileError> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(FileError::Content(format!(
            "{what}: rows of unequal length"
        )));
    }
    Ok(Matrix::from_row_iterator(
        rows.len(),
        cols,
        rows.iter().flatten().copied(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemJson {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B1")]
    pub b1: Rows,
    #[serde(rename = "B2")]
    pub b2: Rows,
    #[serde(rename = "B3")]
    pub b3: Rows,
    #[serde(rename = "C")]
    pub c: Rows,
}

impl SubsystemJson {
    pub fn from_subsystem(s: &Subsystem) -> Self {
        Self {
            a: to_rows(&s.a),
            b1: to_rows(&s.b1),
            b2: to_rows(&s.b2),
            b3: to_rows(&s.b3),
            c: to_rows(&s.c),
        }
    }

    pub fn to_subsystem(&self, label: &str) -> Result<Subsystem, FileError> {
        let m = |rows: &Rows, name: &str| from_rows(rows, &format!("{label} {name}"));
        Ok(Subsystem::new(
            m(&self.a, "A")?,
            m(&self.b1, "B1")?,
            m(&self.b2, "B2")?,
            m(&self.b3, "B3")?,
            m(&self.c, "C")?,
        ))
    }
}

/// Coupling `h(i, j)`, one-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingJson {
    pub i: usize,
    pub j: usize,
    pub h: Rows,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub schema: u32,
    pub subsystems: Vec<SubsystemJson>,
    #[serde(default)]
    pub couplings: Vec<CouplingJson>,
}

fn check_schema(found: u32) -> Result<(), FileError> {
    if found == SCHEMA {
        Ok(())
    } else {
        Err(FileError::Schema { found })
    }
}

fn couplings_json(net: &CascadeNetwork) -> Vec<CouplingJson> {
    net.couplings
        .values()
        .map(|b| CouplingJson {
            i: b.to + 1,
            j: b.from + 1,
            h: to_rows(&b.h),
        })
        .collect()
}

fn coupling_index(c: &CouplingJson) -> Result<(usize, usize), FileError> {
    if c.i == 0 || c.j == 0 {
        return Err(FileError::Content(format!(
            "coupling ({},{}): indices are one-based",
            c.i, c.j
        )));
    }
    Ok((c.i - 1, c.j - 1))
}

impl NetworkFile {
    pub fn from_network(net: &CascadeNetwork) -> Self {
        Self {
            schema: SCHEMA,
            subsystems: net
                .subsystems
                .iter()
                .map(SubsystemJson::from_subsystem)
                .collect(),
            couplings: couplings_json(net),
        }
    }

    /// Parses without structural validation, so the caller can report
    /// every violation at once.
    pub fn to_network_unchecked(&self) -> Result<CascadeNetwork, FileError> {
        check_schema(self.schema)?;
        let subs = self
            .subsystems
            .iter()
            .enumerate()
            .map(|(k, s)| s.to_subsystem(&format!("subsystem {}", k + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut net = CascadeNetwork::new(subs);
        for c in &self.couplings {
            let (to, from) = coupling_index(c)?;
            if net.stored_coupling(to, from).is_some() {
                return Err(FileError::Content(format!(
                    "coupling ({},{}) given twice",
                    c.i, c.j
                )));
            }
            net.set_coupling(to, from, from_rows(&c.h, &format!("h({},{})", c.i, c.j))?);
        }
        Ok(net)
    }

    pub fn to_network(&self) -> Result<CascadeNetwork, FileError> {
        let net = self.to_network_unchecked()?;
        let report = validate_network(&net);
        if !report.is_ok() {
            return Err(FileError::Content(report.to_string()));
        }
        Ok(net)
    }
}

/// SHA-256 of the canonical network document, hex encoded.
pub fn fingerprint(net: &CascadeNetwork) -> String {
    let text = serde_json::to_string(&NetworkFile::from_network(net)).expect("network serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// A subsystem to append, with its couplings to the current tail.
///
/// Couplings use indices of the grown network; those not listed are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AddFile {
    pub schema: u32,
    pub subsystem: SubsystemJson,
    #[serde(default)]
    pub couplings: Vec<CouplingJson>,
}

/// The new subsystem with `h(new,new)`, `h(new,prev)` and `h(prev,new)`;
/// couplings absent from the file are zero blocks.
pub struct Addition {
    pub sub: Subsystem,
    pub h_self: Matrix,
    pub h_to_prev: Matrix,
    pub h_from_prev: Matrix,
}

impl AddFile {
    pub fn to_addition(&self, net: &CascadeNetwork) -> Result<Addition, FileError> {
        check_schema(self.schema)?;
        let new = net.len();
        let sub = self
            .subsystem
            .to_subsystem(&format!("subsystem {}", new + 1))?;
        let (n, p) = (sub.state_dim(), sub.coupling_dim());
        let prev = new.checked_sub(1).map(|k| &net.subsystems[k]);
        let mut addition = Addition {
            h_self: Matrix::zeros(p, n),
            h_to_prev: Matrix::zeros(p, prev.map_or(0, Subsystem::state_dim)),
            h_from_prev: Matrix::zeros(prev.map_or(0, Subsystem::coupling_dim), n),
            sub,
        };
        for c in &self.couplings {
            let (to, from) = coupling_index(c)?;
            let h = from_rows(&c.h, &format!("h({},{})", c.i, c.j))?;
            let slot = match (to, from) {
                _ if to == new && from == new => &mut addition.h_self,
                _ if new > 0 && to == new && from + 1 == new => &mut addition.h_to_prev,
                _ if new > 0 && to + 1 == new && from == new => &mut addition.h_from_prev,
                _ => {
                    return Err(FileError::Content(format!(
                        "coupling ({},{}) does not involve the new subsystem {} and its predecessor (NonCascadeCoupling)",
                        c.i,
                        c.j,
                        new + 1
                    )))
                }
            };
            *slot = h;
        }
        Ok(addition)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordJson {
    pub index: usize,
    pub route: String,
    #[serde(rename = "Q")]
    pub q: Rows,
    pub epsilon: f64,
    #[serde(rename = "K_self")]
    pub k_self: Option<Rows>,
    #[serde(rename = "K_to_prev")]
    pub k_to_prev: Option<Rows>,
    #[serde(rename = "K_prev_to_self")]
    pub k_prev_to_self: Option<Rows>,
    #[serde(rename = "K_to_next")]
    pub k_to_next: Option<Rows>,
    #[serde(rename = "M_cl")]
    pub m_cl: Rows,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub schema: u32,
    pub fingerprint: String,
    pub network: NetworkFile,
    pub records: Vec<RecordJson>,
    pub global_epsilon: f64,
}

impl StateFile {
    pub fn from_state(state: &NetworkDesignState) -> Self {
        let opt = |m: &Option<Matrix>| m.as_ref().map(to_rows);
        Self {
            schema: SCHEMA,
            fingerprint: fingerprint(&state.net),
            network: NetworkFile::from_network(&state.net),
            records: state
                .records
                .iter()
                .map(|r| RecordJson {
                    index: r.index + 1,
                    route: r.route.as_str().to_string(),
                    q: to_rows(&r.q),
                    epsilon: r.epsilon,
                    k_self: opt(&r.k_self),
                    k_to_prev: opt(&r.k_to_prev),
                    k_prev_to_self: opt(&r.k_prev_to_self),
                    k_to_next: opt(&r.k_to_next),
                    m_cl: to_rows(&r.m_cl),
                })
                .collect(),
            global_epsilon: state.global_epsilon,
        }
    }

    /// Rebuilds the design state, refusing a network that does not hash to
    /// the stored fingerprint.
    pub fn to_state(&self) -> Result<NetworkDesignState, FileError> {
        check_schema(self.schema)?;
        let net = self.network.to_network()?;
        let actual = fingerprint(&net);
        if actual != self.fingerprint {
            return Err(FileError::Fingerprint {
                stored: self.fingerprint.clone(),
                actual,
            });
        }
        let records = self
            .records
            .iter()
            .enumerate()
            .map(|(k, r)| {
                if r.index != k + 1 {
                    return Err(FileError::Content(format!(
                        "record {} has index {}",
                        k + 1,
                        r.index
                    )));
                }
                let label = |name: &str| format!("record {} {name}", k + 1);
                let opt = |m: &Option<Rows>, name: &str| {
                    m.as_ref().map(|m| from_rows(m, &label(name))).transpose()
                };
                let route = match r.route.as_str() {
                    "Verified" => Route::Verified,
                    "Synthesized" => Route::Synthesized,
                    other => {
                        return Err(FileError::Content(format!(
                            "{}: unknown route {other:?}",
                            label("route")
                        )))
                    }
                };
                Ok(DesignRecord {
                    index: k,
                    q: from_rows(&r.q, &label("Q"))?,
                    epsilon: r.epsilon,
                    k_self: opt(&r.k_self, "K_self")?,
                    k_to_prev: opt(&r.k_to_prev, "K_to_prev")?,
                    k_prev_to_self: opt(&r.k_prev_to_self, "K_prev_to_self")?,
                    k_to_next: opt(&r.k_to_next, "K_to_next")?,
                    m_cl: from_rows(&r.m_cl, &label("M_cl"))?,
                    route,
                    audit: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(NetworkDesignState {
            net,
            records,
            global_epsilon: self.global_epsilon,
        })
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &str) -> Result<T, FileError> {
    let text = std::fs::read_to_string(path).map_err(|source| FileError::Io {
        path: path.into(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| FileError::Parse {
        path: path.into(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &str, value: &T) -> Result<(), FileError> {
    let mut text = serde_json::to_string_pretty(value).expect("documents serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| FileError::Io {
        path: path.into(),
        source,
    })
}
