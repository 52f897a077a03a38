//! Connectionist temporal classification over `[T, V]` log-probabilities
//! with blank id 0: exact loss and gradient via the forward/backward
//! lattice, collapse, best-path and prefix beam decoding, and an
//! exhaustive-enumeration oracle.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{guarded_ln, log_add_exp, log_sum_exp, Tape, Tensor, Var, NEG_INF};

pub const BLANK: u32 = 0;

/// Largest `V^T` the brute-force oracle will enumerate.
pub const ORACLE_LIMIT: u64 = 1_000_000;

/// A collapsed unit sequence: ids in `[1, V)`, never the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct UnitSequence(Vec<u32>);

impl TryFrom<Vec<u32>> for UnitSequence {
    type Error = Error;
    fn try_from(units: Vec<u32>) -> Result<Self> {
        UnitSequence::new(units)
    }
}

impl From<UnitSequence> for Vec<u32> {
    fn from(u: UnitSequence) -> Vec<u32> {
        u.0
    }
}

impl UnitSequence {
    pub fn new(units: Vec<u32>) -> Result<Self> {
        if units.contains(&BLANK) {
            return Err(Error::Data("unit sequence contains the blank id".into()));
        }
        Ok(UnitSequence(units))
    }

    pub fn empty() -> Self {
        UnitSequence(Vec::new())
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adjacent equal pairs; each one needs a separating blank frame.
    pub fn repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Fewest frames any alignment of this sequence can use.
    pub fn min_frames(&self) -> usize {
        self.len() + self.repeats()
    }

    pub fn max_id(&self) -> Option<u32> {
        self.0.iter().copied().max()
    }
}

/// Merge adjacent duplicates, then drop blanks.
pub fn collapse(alignment: &[u32]) -> UnitSequence {
    let mut out = Vec::new();
    let mut prev: Option<u32> = None;
    for &a in alignment {
        if prev != Some(a) && a != BLANK {
            out.push(a);
        }
        prev = Some(a);
    }
    UnitSequence(out)
}

fn check_shape(log_probs: &Tensor, target: &UnitSequence) -> Result<(usize, usize)> {
    if log_probs.rank() != 2 {
        return Err(Error::dim("ctc", format!("log_probs must be [T, V], got {:?}", log_probs.shape())));
    }
    let (t, v) = (log_probs.shape()[0], log_probs.shape()[1]);
    if v < 2 {
        return Err(Error::dim("ctc", format!("vocabulary of {v} has no room for blank plus a unit")));
    }
    if let Some(m) = target.max_id() {
        if m as usize >= v {
            return Err(Error::dim("ctc", format!("unit id {m} outside vocabulary {v}")));
        }
    }
    Ok((t, v))
}

fn check_normalized(log_probs: &Tensor) -> Result<()> {
    for r in 0..log_probs.rows() {
        let lse = log_sum_exp(log_probs.row(r));
        if lse.abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "log_probs row {r} is not normalized (logsumexp = {lse:e})"
            )));
        }
    }
    Ok(())
}

/// Forward/backward tables over the blank-extended target.
///
/// `alpha[t][s]` and `beta[t][s]` both include the emission at frame `t`,
/// so the terminal alpha cells and the initial beta cells each sum to
/// `log P(y)`.
#[derive(Clone, Debug)]
pub struct AlignmentLattice {
    extended: Vec<u32>,
    frames: usize,
    emissions: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_likelihood: f64,
}

impl AlignmentLattice {
    pub fn compute(log_probs: &Tensor, target: &UnitSequence) -> Result<Self> {
        let (t_len, v) = check_shape(log_probs, target)?;
        check_normalized(log_probs)?;
        let required = target.min_frames();
        if t_len < required.max(1) {
            return Err(Error::InfeasibleAlignment {
                required: required.max(1),
                available: t_len,
            });
        }
        let mut extended = Vec::with_capacity(2 * target.len() + 1);
        extended.push(BLANK);
        for &u in target.as_slice() {
            extended.push(u);
            extended.push(BLANK);
        }
        let s_len = extended.len();
        let lp = |t: usize, s: usize| log_probs.data()[t * v + extended[s] as usize];
        // a skip from s-2 to s is allowed onto a label that differs from the previous label
        let can_skip = |s: usize| s >= 2 && extended[s] != BLANK && extended[s] != extended[s - 2];

        let mut alpha = vec![NEG_INF; t_len * s_len];
        alpha[0] = lp(0, 0);
        if s_len > 1 {
            alpha[1] = lp(0, 1);
        }
        for t in 1..t_len {
            for s in 0..s_len {
                let prev = &alpha[(t - 1) * s_len..t * s_len];
                let mut acc = prev[s];
                if s >= 1 {
                    acc = log_add_exp(acc, prev[s - 1]);
                }
                if can_skip(s) {
                    acc = log_add_exp(acc, prev[s - 2]);
                }
                alpha[t * s_len + s] = if acc <= NEG_INF { NEG_INF } else { acc + lp(t, s) };
            }
        }

        let mut beta = vec![NEG_INF; t_len * s_len];
        let last = (t_len - 1) * s_len;
        beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
        if s_len > 1 {
            beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
        }
        for t in (0..t_len - 1).rev() {
            for s in 0..s_len {
                let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
                let mut acc = next[s];
                if s + 1 < s_len {
                    acc = log_add_exp(acc, next[s + 1]);
                }
                if s + 2 < s_len && can_skip(s + 2) {
                    acc = log_add_exp(acc, next[s + 2]);
                }
                beta[t * s_len + s] = if acc <= NEG_INF { NEG_INF } else { acc + lp(t, s) };
            }
        }

        let end = &alpha[last..];
        let log_likelihood = if s_len > 1 {
            log_add_exp(end[s_len - 1], end[s_len - 2])
        } else {
            end[0]
        };
        let emissions = log_probs.data().to_vec();
        Ok(AlignmentLattice {
            extended,
            frames: t_len,
            emissions,
            alpha,
            beta,
            log_likelihood,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn extended_target(&self) -> &[u32] {
        &self.extended
    }

    pub fn alpha(&self, t: usize, s: usize) -> f64 {
        self.alpha[t * self.extended.len() + s]
    }

    pub fn beta(&self, t: usize, s: usize) -> f64 {
        self.beta[t * self.extended.len() + s]
    }

    /// `log P(y | x)`, summed over all alignments.
    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    fn vocab(&self) -> usize {
        self.emissions.len() / self.frames
    }

    /// Log of the total path mass through frame `t`; equals
    /// [`Self::log_likelihood`] at every `t`.
    pub fn slice_mass(&self, t: usize) -> f64 {
        let v = self.vocab();
        let terms: Vec<f64> = (0..self.extended.len())
            .map(|s| {
                let a = self.alpha(t, s) + self.beta(t, s);
                if self.alpha(t, s) <= NEG_INF || self.beta(t, s) <= NEG_INF {
                    NEG_INF
                } else {
                    a - self.emissions[t * v + self.extended[s] as usize]
                }
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// `d(-log P(y)) / d log_probs`: minus the per-frame label posterior.
    pub fn grad_log_probs(&self) -> Vec<f64> {
        let v = self.vocab();
        let mut g = vec![0.0; self.emissions.len()];
        for t in 0..self.frames {
            for (s, &k) in self.extended.iter().enumerate() {
                let (a, b) = (self.alpha(t, s), self.beta(t, s));
                if a <= NEG_INF || b <= NEG_INF {
                    continue;
                }
                let idx = t * v + k as usize;
                let gamma = a + b - self.emissions[idx] - self.log_likelihood;
                g[idx] -= gamma.exp();
            }
        }
        g
    }

    /// One line per frame of tab-separated log-alpha values.
    pub fn dump_alpha(&self) -> String {
        let s_len = self.extended.len();
        let mut out = String::new();
        for t in 0..self.frames {
            let row = &self.alpha[t * s_len..(t + 1) * s_len];
            let cells: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
            let _ = writeln!(out, "{}", cells.join("\t"));
        }
        out
    }
}

/// Parses a lattice dump back into rows of log-alpha values.
pub fn parse_alpha_dump(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .map(|line| {
            line.split('\t')
                .map(|c| c.parse::<f64>().map_err(|e| Error::Data(format!("bad lattice cell {c:?}: {e}"))))
                .collect()
        })
        .collect()
}

/// `-log P(y | x)` without recording anything.
pub fn ctc_nll(log_probs: &Tensor, target: &UnitSequence) -> Result<f64> {
    Ok(-AlignmentLattice::compute(log_probs, target)?.log_likelihood())
}

/// CTC negative log-likelihood recorded on the tape with its exact gradient.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, target: &UnitSequence) -> Result<Var> {
    let lattice = AlignmentLattice::compute(tape.value(log_probs), target)?;
    let grad = lattice.grad_log_probs();
    tape.scalar_fn(log_probs, -lattice.log_likelihood(), grad)
}

/// Enumerates all `V^T` alignments and sums the ones collapsing to `target`.
pub fn ctc_brute_force(log_probs: &Tensor, target: &UnitSequence) -> Result<f64> {
    let (t_len, v) = check_shape(log_probs, target)?;
    let total = (v as u64).checked_pow(t_len as u32).unwrap_or(u64::MAX);
    if total > ORACLE_LIMIT {
        return Err(Error::OracleSize(format!("{v}^{t_len} alignments exceeds {ORACLE_LIMIT}")));
    }
    let mut path = vec![0u32; t_len];
    let mut mass = 0.0;
    for _ in 0..total {
        if collapse(&path) == *target {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &k)| log_probs.data()[t * v + k as usize])
                .sum();
            mass += lp.exp();
        }
        for slot in path.iter_mut().rev() {
            *slot += 1;
            if (*slot as usize) < v {
                break;
            }
            *slot = 0;
        }
    }
    Ok(-guarded_ln(mass))
}

/// Every collapsed sequence over labels `1..v` that fits in `frames` frames.
pub fn feasible_targets(frames: usize, vocab: usize) -> Result<Vec<UnitSequence>> {
    let labels = vocab.saturating_sub(1) as u64;
    let mut count: u64 = 0;
    let mut pow: u64 = 1;
    for _ in 0..=frames {
        count = count.saturating_add(pow);
        pow = pow.saturating_mul(labels);
    }
    if count > ORACLE_LIMIT {
        return Err(Error::OracleSize(format!(
            "{count} candidate targets for T={frames}, V={vocab}"
        )));
    }
    let mut out = vec![UnitSequence::empty()];
    let mut frontier = vec![Vec::<u32>::new()];
    for _ in 0..frames {
        let mut next = Vec::new();
        for prefix in &frontier {
            for k in 1..vocab as u32 {
                let mut y = prefix.clone();
                y.push(k);
                let seq = UnitSequence(y.clone());
                if seq.min_frames() <= frames {
                    out.push(seq);
                    next.push(y);
                }
            }
        }
        frontier = next;
    }
    Ok(out)
}

/// `sum_y P(y | x)` over every feasible collapsed target, via the lattice.
pub fn partition_sum(log_probs: &Tensor) -> Result<f64> {
    let (t_len, v) = (log_probs.shape()[0], log_probs.last_dim());
    let mut total = 0.0;
    for y in feasible_targets(t_len, v)? {
        total += AlignmentLattice::compute(log_probs, &y)?.log_likelihood().exp();
    }
    Ok(total)
}

/// Per-frame argmax alignment (ties go to the smaller id) and its collapse.
pub fn greedy_decode(log_probs: &Tensor) -> (UnitSequence, Vec<u32>) {
    let mut best = Vec::with_capacity(log_probs.rows());
    for r in 0..log_probs.rows() {
        let row = log_probs.row(r);
        let mut arg = 0usize;
        for (k, &x) in row.iter().enumerate() {
            if x > row[arg] {
                arg = k;
            }
        }
        best.push(arg as u32);
    }
    (collapse(&best), best)
}

/// Log-probability of one alignment.
pub fn alignment_log_prob(log_probs: &Tensor, alignment: &[u32]) -> f64 {
    let v = log_probs.last_dim();
    alignment
        .iter()
        .enumerate()
        .map(|(t, &k)| log_probs.data()[t * v + k as usize])
        .sum()
}

#[derive(Clone, Copy, Debug)]
struct PrefixScore {
    blank: f64,
    label: f64,
}

impl PrefixScore {
    fn total(self) -> f64 {
        log_add_exp(self.blank, self.label)
    }
}

/// Prefix beam search over collapsed sequences. Returns hypotheses with their
/// beam log-scores, best first.
pub fn prefix_beam_search(log_probs: &Tensor, beam: usize) -> Result<Vec<(UnitSequence, f64)>> {
    Ok(beam_search(log_probs, beam)?.0)
}

/// The search proper; the flag reports whether any step had to drop prefixes.
fn beam_search(log_probs: &Tensor, beam: usize) -> Result<(Vec<(UnitSequence, f64)>, bool)> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let v = log_probs.last_dim();
    let mut truncated = false;
    let mut beams: Vec<(Vec<u32>, PrefixScore)> = vec![(
        Vec::new(),
        PrefixScore {
            blank: 0.0,
            label: NEG_INF,
        },
    )];
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut next: HashMap<Vec<u32>, PrefixScore> = HashMap::new();
        let mut bump = |key: Vec<u32>, blank: f64, label: f64| {
            let e = next.entry(key).or_insert(PrefixScore {
                blank: NEG_INF,
                label: NEG_INF,
            });
            e.blank = log_add_exp(e.blank, blank);
            e.label = log_add_exp(e.label, label);
        };
        for (prefix, sc) in &beams {
            bump(prefix.clone(), sc.total() + row[BLANK as usize], NEG_INF);
            let last = prefix.last().copied();
            for k in 1..v as u32 {
                let p = row[k as usize];
                let mut ext = prefix.clone();
                ext.push(k);
                if last == Some(k) {
                    bump(prefix.clone(), NEG_INF, sc.label + p);
                    bump(ext, NEG_INF, sc.blank + p);
                } else {
                    bump(ext, NEG_INF, sc.total() + p);
                }
            }
        }
        let mut ranked: Vec<(Vec<u32>, PrefixScore)> = next.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total().total_cmp(&a.1.total()).then_with(|| a.0.cmp(&b.0)));
        truncated |= ranked.len() > beam;
        ranked.truncate(beam);
        beams = ranked;
    }
    let hyps = beams.into_iter().map(|(p, s)| (UnitSequence(p), s.total())).collect();
    Ok((hyps, truncated))
}

/// Best collapsed sequence by exact marginal among the final hypotheses of
/// searches at every width up to `beam`. Plain prefix beam search can do
/// worse with a wider beam; pooling the narrower searches rules that out,
/// and a search that never truncates already covers every wider one.
pub fn prefix_beam_decode(log_probs: &Tensor, beam: usize) -> Result<UnitSequence> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut best: Option<(f64, UnitSequence)> = None;
    for width in 1..=beam {
        let (hyps, truncated) = beam_search(log_probs, width)?;
        // prefixes reached only through impossible moves cannot be scored
        for (y, _) in hyps.into_iter().filter(|(y, _)| y.min_frames() <= log_probs.rows()) {
            let score = -ctc_nll(log_probs, &y)?;
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, y));
            }
        }
        if !truncated {
            break;
        }
    }
    Ok(best.map(|(_, y)| y).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(t: usize, v: usize) -> Tensor {
        Tensor::filled(&[t, v], -(v as f64).ln())
    }

    fn seq(v: &[u32]) -> UnitSequence {
        UnitSequence::new(v.to_vec()).unwrap()
    }

    #[test]
    fn two_frame_uniform_single_label() {
        let lp = uniform(2, 2);
        let loss = ctc_nll(&lp, &seq(&[1])).unwrap();
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((loss - 0.28768).abs() < 1e-5);
        let bf = ctc_brute_force(&lp, &seq(&[1])).unwrap();
        assert!((bf - loss).abs() < 1e-12);
        let empty = ctc_nll(&lp, &UnitSequence::empty()).unwrap();
        assert!((empty - (-(0.25f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_sum_of_blank_log_probs() {
        let lp = Tensor::from_rows(&[
            vec![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()],
            vec![0.6f64.ln(), 0.1f64.ln(), 0.3f64.ln()],
            vec![0.9f64.ln(), 0.05f64.ln(), 0.05f64.ln()],
        ])
        .unwrap();
        let expect = -(0.2f64.ln() + 0.6f64.ln() + 0.9f64.ln());
        assert!((ctc_nll(&lp, &UnitSequence::empty()).unwrap() - expect).abs() < 1e-12);
        assert!((ctc_brute_force(&lp, &UnitSequence::empty()).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn repeat_needs_separating_blank() {
        match ctc_nll(&uniform(2, 2), &seq(&[1, 1])) {
            Err(Error::InfeasibleAlignment { required, available }) => {
                assert_eq!((required, available), (3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(ctc_nll(&uniform(3, 2), &seq(&[1, 1])).is_ok());
    }

    #[test]
    fn unnormalized_rows_are_rejected() {
        let lp = Tensor::filled(&[2, 2], -0.1);
        assert!(matches!(ctc_nll(&lp, &seq(&[1])), Err(Error::Contract(_))));
    }

    #[test]
    fn collapse_rules() {
        assert_eq!(collapse(&[0, 1, 1, 0, 2]), seq(&[1, 2]));
        assert_eq!(collapse(&[1, 0, 1]), seq(&[1, 1]));
        assert_eq!(collapse(&[0, 0, 0]), UnitSequence::empty());
        assert!(UnitSequence::new(vec![1, 0]).is_err());
    }

    #[test]
    fn greedy_on_one_hot_and_uniform_rows() {
        let hot = |k: usize| {
            let mut r = vec![guarded_ln(0.0); 3];
            r[k] = 0.0;
            r
        };
        let lp = Tensor::from_rows(&[hot(1), hot(0), hot(2)]).unwrap();
        let (y, a) = greedy_decode(&lp);
        assert_eq!(a, vec![1, 0, 2]);
        assert_eq!(y, seq(&[1, 2]));
        let (y, a) = greedy_decode(&uniform(4, 3));
        assert_eq!(a, vec![0; 4]);
        assert!(y.is_empty());
    }

    #[test]
    fn beam_errors_and_degenerate_width() {
        assert!(matches!(prefix_beam_decode(&uniform(2, 2), 0), Err(Error::Config(_))));
        let norm = |r: [f64; 3]| {
            let z = r.iter().map(|v| v.exp()).sum::<f64>().ln();
            r.iter().map(|v| v - z).collect::<Vec<_>>()
        };
        let lp = Tensor::from_rows(&[
            norm([-10.0, 0.0, -10.0]),
            norm([0.0, -10.0, -10.0]),
            norm([-10.0, -10.0, 0.0]),
        ])
        .unwrap();
        assert_eq!(prefix_beam_decode(&lp, 1).unwrap(), greedy_decode(&lp).0);
    }

    #[test]
    fn lattice_dump_round_trips() {
        let lat = AlignmentLattice::compute(&uniform(3, 3), &seq(&[1, 2])).unwrap();
        let rows = parse_alpha_dump(&lat.dump_alpha()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].len(), 5);
        assert_eq!(rows[2][4], lat.alpha(2, 4));
        // unreachable at t=0: s >= 2
        assert_eq!(rows[0][3], NEG_INF);
    }

    #[test]
    fn ctc_gradient_passes_finite_differences() {
        use crate::tensor::finite_difference_check;
        let x = Tensor::new(
            vec![4, 3],
            vec![0.3, -0.2, 0.9, 1.1, 0.4, -0.7, -0.5, 0.8, 0.1, 0.2, 0.0, -0.3],
        )
        .unwrap();
        let target = seq(&[1, 2]);
        let err = finite_difference_check(
            |tape, v| {
                let lp = tape.log_softmax_last_dim(v)?;
                ctc_loss(tape, lp, &target)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
