//! Task vectors `τ_t = θ_t* − θ0` and their scaled composition
//! `θ0 + Σ α_t τ_t`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{sha256_hex, write_file, ByteReader, ByteWriter};
use crate::error::{Result, TakError};
use crate::network::{decode_layers, encode_layers, NetSpec, ParamLayout, ParamVector};

/// Parameter count from which composition switches to pairwise summation.
pub const PAIRWISE_THRESHOLD: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub delta: ParamVector,
    pub task_id: String,
    pub default_alpha: f64,
    /// Hash of the anchor the vector was taken against.
    pub anchor_hash: String,
}

/// SHA-256 over the anchor's layout and little-endian parameter bytes.
pub fn anchor_hash(theta0: &ParamVector) -> String {
    let mut bytes = serde_json::to_vec(theta0.layout()).expect("layouts serialize");
    for v in theta0.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

pub fn make_task_vector(
    theta0: &ParamVector,
    theta_star: &ParamVector,
    task_id: impl Into<String>,
) -> Result<TaskVector> {
    Ok(TaskVector {
        delta: theta_star.minus(theta0)?,
        task_id: task_id.into(),
        default_alpha: 1.0,
        anchor_hash: anchor_hash(theta0),
    })
}

impl TaskVector {
    /// Wraps an already computed displacement.
    pub fn from_delta(theta0: &ParamVector, delta: ParamVector, task_id: impl Into<String>) -> Result<Self> {
        delta.check_same_layout(theta0, "TaskVector::from_delta")?;
        Ok(Self {
            delta,
            task_id: task_id.into(),
            default_alpha: 1.0,
            anchor_hash: anchor_hash(theta0),
        })
    }
}

fn pairwise_sum(terms: &[f64]) -> f64 {
    match terms.len() {
        0 => 0.0,
        1 => terms[0],
        n => {
            let (l, r) = terms.split_at(n / 2);
            pairwise_sum(l) + pairwise_sum(r)
        }
    }
}

/// `θ0 + Σ α_t τ_t`, summed in the given order. Anchors are not checked; see
/// [`compose_verified`].
pub fn compose(theta0: &ParamVector, vectors: &[(&TaskVector, f64)]) -> Result<ParamVector> {
    for (tv, _) in vectors {
        tv.delta.check_same_layout(theta0, "compose")?;
    }
    let mut out = theta0.clone();
    if theta0.len() >= PAIRWISE_THRESHOLD && vectors.len() > 1 {
        let mut terms = vec![0.0; vectors.len() + 1];
        for (i, o) in out.values_mut().iter_mut().enumerate() {
            terms[0] = *o;
            for (k, (tv, alpha)) in vectors.iter().enumerate() {
                terms[k + 1] = alpha * tv.delta.values()[i];
            }
            *o = pairwise_sum(&terms);
        }
    } else {
        for (tv, alpha) in vectors {
            out.add_scaled(*alpha, &tv.delta)?;
        }
    }
    Ok(out)
}

/// [`compose`] after checking every vector was built against `theta0`.
pub fn compose_verified(theta0: &ParamVector, vectors: &[(&TaskVector, f64)]) -> Result<ParamVector> {
    let expected = anchor_hash(theta0);
    for (tv, _) in vectors {
        if tv.anchor_hash != expected {
            return Err(TakError::AnchorMismatch {
                expected: tv.anchor_hash.clone(),
                got: expected,
            });
        }
    }
    compose(theta0, vectors)
}

/// Evaluates the composition at each uniform `α` in `alphas`; rows sorted by `α`.
pub fn alpha_sweep<F>(
    theta0: &ParamVector,
    vectors: &[&TaskVector],
    alphas: &[f64],
    mut evaluator: F,
) -> Result<Vec<(f64, f64)>>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    if alphas.is_empty() {
        return Err(TakError::Parameter("alpha grid is empty".into()));
    }
    let mut grid = alphas.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.into_iter()
        .map(|alpha| {
            let scaled: Vec<(&TaskVector, f64)> = vectors.iter().map(|&tv| (tv, alpha)).collect();
            Ok((alpha, evaluator(&compose(theta0, &scaled)?)?))
        })
        .collect()
}

/// Uniform grid `start, start + step, …` up to `end` inclusive (within half a step).
pub fn grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    if step == 0.0 {
        return vec![start];
    }
    let n = ((end - start) / step + 0.5).floor();
    if n < 0.0 {
        return Vec::new();
    }
    (0..=n as usize).map(|i| start + i as f64 * step).collect()
}

const TASKVEC_MAGIC: &[u8; 8] = b"TAKTVEC1";

#[derive(Serialize, Deserialize)]
struct TaskVectorHeader {
    net: NetSpec,
    layout: ParamLayout,
    task_id: String,
    default_alpha: f64,
    anchor_hash: String,
}

pub fn encode_task_vector(net: &NetSpec, tv: &TaskVector) -> Result<Vec<u8>> {
    tv.delta.check_layout(&net.layout(), "task vector file")?;
    let mut w = ByteWriter::new();
    w.bytes(TASKVEC_MAGIC);
    w.json(&TaskVectorHeader {
        net: net.clone(),
        layout: tv.delta.layout().clone(),
        task_id: tv.task_id.clone(),
        default_alpha: tv.default_alpha,
        anchor_hash: tv.anchor_hash.clone(),
    })?;
    encode_layers(&mut w, &tv.delta);
    Ok(w.into_inner())
}

pub fn decode_task_vector(bytes: &[u8]) -> Result<(NetSpec, TaskVector)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(TASKVEC_MAGIC)?;
    let at = r.offset();
    let h: TaskVectorHeader = r.json()?;
    h.net.validate()?;
    if h.net.layout() != h.layout {
        return Err(TakError::Format {
            offset: at,
            message: "layout does not match network description".into(),
        });
    }
    let delta = decode_layers(&mut r, &h.layout)?;
    r.finish()?;
    Ok((
        h.net,
        TaskVector {
            delta,
            task_id: h.task_id,
            default_alpha: h.default_alpha,
            anchor_hash: h.anchor_hash,
        },
    ))
}

pub fn save_task_vector(path: &Path, net: &NetSpec, tv: &TaskVector) -> Result<()> {
    write_file(path, &encode_task_vector(net, tv)?)
}

pub fn load_task_vector(path: &Path) -> Result<(NetSpec, TaskVector)> {
    decode_task_vector(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use crate::network::Activation;

    fn setup() -> (NetSpec, ParamVector, Rng) {
        let net = NetSpec::mlp(&[3, 4, 2], Activation::Tanh).unwrap();
        let mut rng = Rng::new(1);
        let theta0 = net.init_params(&mut rng);
        (net, theta0, rng)
    }

    fn random_like(p: &ParamVector, rng: &mut Rng) -> ParamVector {
        ParamVector::from_values(p.layout(), (0..p.len()).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn task_vector_is_elementwise_difference() {
        let (_, theta0, mut rng) = setup();
        assert!(make_task_vector(&theta0, &theta0, "a").unwrap().delta.is_zero());
        let star = random_like(&theta0, &mut rng);
        let tv = make_task_vector(&theta0, &star, "a").unwrap();
        for i in 0..theta0.len() {
            assert_eq!(tv.delta.values()[i], star.values()[i] - theta0.values()[i]);
        }
    }

    #[test]
    fn compose_trivial_cases() {
        let (_, theta0, mut rng) = setup();
        assert_eq!(compose(&theta0, &[]).unwrap(), theta0);
        let tv = TaskVector::from_delta(&theta0, random_like(&theta0, &mut rng), "a").unwrap();
        let added = compose(&theta0, &[(&tv, 1.0)]).unwrap();
        let back = compose(&added, &[(&tv, -1.0)]).unwrap();
        assert!(back.minus(&theta0).unwrap().values().iter().all(|v| v.abs() < 1e-14));
        let scaled = compose(&theta0, &[(&tv, 0.3)]).unwrap().minus(&theta0).unwrap();
        for (a, b) in scaled.values().iter().zip(tv.delta.values()) {
            assert!((a - 0.3 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn anchor_checks() {
        let (_, theta0, mut rng) = setup();
        let other = random_like(&theta0, &mut rng);
        let tv = make_task_vector(&other, &theta0, "a").unwrap();
        assert!(matches!(
            compose_verified(&theta0, &[(&tv, 1.0)]),
            Err(TakError::AnchorMismatch { .. })
        ));
        assert!(compose_verified(&other, &[(&tv, 1.0)]).is_ok());
    }

    #[test]
    fn sweep_sorted_and_zero_alpha_is_anchor() {
        let (_, theta0, mut rng) = setup();
        let tv = TaskVector::from_delta(&theta0, random_like(&theta0, &mut rng), "a").unwrap();
        let rows = alpha_sweep(&theta0, &[&tv], &[1.0, 0.0, 0.5], |p| Ok(p.minus(&theta0)?.norm())).unwrap();
        assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
        assert_eq!(rows[0].1, 0.0);
        assert!(alpha_sweep(&theta0, &[&tv], &[], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn grid_endpoints() {
        let g = grid(0.2, 1.6, 0.2);
        assert_eq!(g.len(), 8);
        assert!((g[7] - 1.6).abs() < 1e-12);
        assert_eq!(grid(0.0, -3.0, -0.1).len(), 31);
    }

    #[test]
    fn pairwise_sum_matches_plain_sum_on_exact_values() {
        assert_eq!(pairwise_sum(&[1.0, 2.0, 3.0, 4.0, 5.0]), 15.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn file_round_trip() {
        let (net, theta0, mut rng) = setup();
        let star = random_like(&theta0, &mut rng);
        let mut tv = make_task_vector(&theta0, &star, "task-2").unwrap();
        tv.default_alpha = 0.8;
        let bytes = encode_task_vector(&net, &tv).unwrap();
        let (net2, tv2) = decode_task_vector(&bytes).unwrap();
        assert_eq!(net2, net);
        assert_eq!(tv2, tv);
        assert!(matches!(decode_task_vector(&bytes[..20]), Err(TakError::Format { .. })));
    }
}
