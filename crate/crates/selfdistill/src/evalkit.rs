//! Evaluation metrics: greedy-decode task accuracy, gold-completion fit
//! perplexity, base-distribution retention perplexity, token-level JSD
//! profiles against the frozen base, and paired run comparisons.
//!
//! Both perplexities use the global pooled mean over completion-token
//! positions (sums pooled across the dataset before the exp), not a mean of
//! per-example means.

use serde::{Deserialize, Serialize};

use crate::corpus::{check_answer, Split, TaskDataset};
use crate::objectives::{divergence_from_logs, DivergenceKind};
use crate::params::PolicyParameters;
use crate::policy::{
    greedy_decode, rollout_prefix, sample_completion, score_distributions, score_tokens,
    Trajectory,
};
use crate::scalar::Scalar;
use crate::tokens::{Vocab, EOS};
use crate::trainer::stream_seed;
use crate::{Error, Result};

pub const JSD_HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub fit_ppl: f64,
    pub retention_ppl: f64,
    pub mean_token_jsd: f64,
    pub jsd_histogram: Vec<u64>,
    pub n_examples: usize,
    pub seed: u64,
    /// Anomalies such as infinite perplexities or excluded empty rollouts.
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedComparison {
    pub frac_lower_jsd: f64,
    pub frac_higher_base_lp: f64,
    pub mean_diff_jsd: f64,
    pub median_diff_jsd: f64,
    pub ties_jsd: usize,
    pub ties_base_lp: usize,
}

/// Greedy decoding accuracy against the task checker on the eval split.
pub fn task_accuracy<T: Scalar>(
    params: &PolicyParameters<T>,
    dataset: &TaskDataset,
    max_completion: usize,
) -> Result<f64> {
    if dataset.split != Split::Eval {
        return Err(Error::Config("task_accuracy expects the eval split".into()));
    }
    if dataset.examples.is_empty() {
        return Err(Error::Config("empty evaluation dataset".into()));
    }
    let mut hits = 0usize;
    for ex in &dataset.examples {
        let answer = greedy_decode(params, &ex.prompt, max_completion)?;
        if check_answer(ex.task_kind, &ex.prompt, &answer) {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.examples.len() as f64)
}

/// Teacher-forced perplexity of gold completions: exp of the negative
/// pooled mean gold-token log-prob. Any `-inf` log-prob yields `+inf`,
/// flagged by the caller through `is_finite`.
pub fn fit_perplexity<T: Scalar>(
    params: &PolicyParameters<T>,
    dataset: &TaskDataset,
) -> Result<f64> {
    let v = Vocab::reference();
    let mut total_lp = 0.0f64;
    let mut total_tokens = 0usize;
    for ex in &dataset.examples {
        if ex.gold.is_empty() {
            return Err(Error::Config(format!("example {} has empty gold", ex.id)));
        }
        let prefix = rollout_prefix(&ex.prompt)?;
        let mut completion = v.encode(&ex.gold)?;
        completion.push(EOS);
        let traj = Trajectory::forced(prefix, completion);
        let lp = score_tokens(params, &[], &traj)?;
        total_lp += lp.iter().map(|x| x.as_f64()).sum::<f64>();
        total_tokens += lp.len();
    }
    if total_tokens == 0 {
        return Err(Error::Config("no completion tokens to score".into()));
    }
    Ok((-total_lp / total_tokens as f64).exp())
}

/// Per-prompt rollout diagnostics against the frozen base model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptProfile {
    pub mean_jsd: f64,
    pub mean_base_lp: f64,
    pub completion_len: usize,
}

/// Samples one completion per prompt from `adapted` and scores it under
/// both models: the per-position equal-weight JSD between their next-token
/// distributions and the base log-prob of the sampled tokens.
pub fn rollout_profiles<T: Scalar>(
    adapted: &PolicyParameters<T>,
    base: &PolicyParameters<T>,
    prompts: &[String],
    temperature: f64,
    max_completion: usize,
    seed: u64,
) -> Result<Vec<PromptProfile>> {
    if adapted.arch.vocab != base.arch.vocab {
        return Err(Error::Parameter("models must share a vocabulary".into()));
    }
    let mut out = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let prefix = rollout_prefix(prompt)?;
        let traj = sample_completion(
            adapted,
            &prefix,
            temperature,
            max_completion,
            stream_seed(seed, &format!("profile-{i}")),
        )?;
        let t = traj.len();
        let adapted_trace = score_distributions(adapted, &[], &traj)?;
        let base_trace = score_distributions(base, &[], &traj)?;
        let v = adapted.arch.vocab;
        let mut jsd_acc = 0.0;
        for row in 0..t {
            let a = &adapted_trace.logprobs[row * v..(row + 1) * v];
            let b = &base_trace.logprobs[row * v..(row + 1) * v];
            jsd_acc += divergence_from_logs(a, b, DivergenceKind::WeightedJsd, 0.5).as_f64();
        }
        let base_lp = base_trace.gather(&traj.completion);
        let mean_base_lp = base_lp.iter().map(|x| x.as_f64()).sum::<f64>() / t as f64;
        out.push(PromptProfile {
            mean_jsd: jsd_acc / t as f64,
            mean_base_lp,
            completion_len: t,
        });
    }
    Ok(out)
}

/// Base-distribution retention: sample from `adapted`, score the sampled
/// tokens under the frozen base, exp of the negative pooled mean. Empty
/// completions cannot arise (EOS always counts), but zero-length requests
/// are excluded and counted by the caller.
pub fn retention_perplexity<T: Scalar>(
    base: &PolicyParameters<T>,
    adapted: &PolicyParameters<T>,
    prompts: &[String],
    temperature: f64,
    max_completion: usize,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Config("no prompts for retention sampling".into()));
    }
    let mut total_lp = 0.0f64;
    let mut total_tokens = 0usize;
    for (i, prompt) in prompts.iter().enumerate() {
        let prefix = rollout_prefix(prompt)?;
        let traj = sample_completion(
            adapted,
            &prefix,
            temperature,
            max_completion,
            stream_seed(seed, &format!("retention-{i}")),
        )?;
        let lp = score_tokens(base, &[], &traj)?;
        total_lp += lp.iter().map(|x| x.as_f64()).sum::<f64>();
        total_tokens += lp.len();
    }
    if total_tokens == 0 {
        return Err(Error::Config("retention sampled no tokens".into()));
    }
    Ok((-total_lp / total_tokens as f64).exp())
}

/// Per-prompt mean token-level JSD between the adapted and base next-token
/// distributions along adapted rollouts.
pub fn token_jsd_profile<T: Scalar>(
    adapted: &PolicyParameters<T>,
    base: &PolicyParameters<T>,
    prompts: &[String],
    temperature: f64,
    max_completion: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(
        rollout_profiles(adapted, base, prompts, temperature, max_completion, seed)?
            .into_iter()
            .map(|p| p.mean_jsd)
            .collect(),
    )
}

/// Paired statistics over the identical prompt set: fraction of prompts
/// where run A has strictly lower JSD, fraction where A's completions get
/// strictly higher base log-prob, and mean/median paired JSD differences.
/// Ties are counted separately.
pub fn paired_compare(
    run_a_jsd: &[f64],
    run_b_jsd: &[f64],
    run_a_base_lp: &[f64],
    run_b_base_lp: &[f64],
) -> Result<PairedComparison> {
    let n = run_a_jsd.len();
    if run_b_jsd.len() != n || run_a_base_lp.len() != n || run_b_base_lp.len() != n || n == 0 {
        return Err(Error::Pairing(format!(
            "profile lengths differ or are empty: {} {} {} {}",
            run_a_jsd.len(),
            run_b_jsd.len(),
            run_a_base_lp.len(),
            run_b_base_lp.len()
        )));
    }
    let mut lower = 0usize;
    let mut ties_jsd = 0usize;
    let mut higher = 0usize;
    let mut ties_lp = 0usize;
    let mut diffs: Vec<f64> = Vec::with_capacity(n);
    for i in 0..n {
        if run_a_jsd[i] < run_b_jsd[i] {
            lower += 1;
        } else if run_a_jsd[i] == run_b_jsd[i] {
            ties_jsd += 1;
        }
        if run_a_base_lp[i] > run_b_base_lp[i] {
            higher += 1;
        } else if run_a_base_lp[i] == run_b_base_lp[i] {
            ties_lp += 1;
        }
        diffs.push(run_a_jsd[i] - run_b_jsd[i]);
    }
    diffs.sort_by(|a, b| a.partial_cmp(b).expect("finite diffs"));
    let median = if n % 2 == 1 {
        diffs[n / 2]
    } else {
        0.5 * (diffs[n / 2 - 1] + diffs[n / 2])
    };
    Ok(PairedComparison {
        frac_lower_jsd: lower as f64 / n as f64,
        frac_higher_base_lp: higher as f64 / n as f64,
        mean_diff_jsd: diffs.iter().sum::<f64>() / n as f64,
        median_diff_jsd: median,
        ties_jsd,
        ties_base_lp: ties_lp,
    })
}

/// Histogram of per-prompt mean JSD values over [0, ln 2].
pub fn jsd_histogram(values: &[f64]) -> Vec<u64> {
    let mut bins = vec![0u64; JSD_HISTOGRAM_BINS];
    let top = std::f64::consts::LN_2;
    for &v in values {
        let idx = ((v / top) * JSD_HISTOGRAM_BINS as f64).floor() as usize;
        bins[idx.min(JSD_HISTOGRAM_BINS - 1)] += 1;
    }
    bins
}

/// Full evaluation of one policy against the frozen base on the eval split.
pub fn evaluate<T: Scalar>(
    params: &PolicyParameters<T>,
    base: &PolicyParameters<T>,
    dataset: &TaskDataset,
    temperature: f64,
    max_completion: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<PromptProfile>)> {
    let accuracy = task_accuracy(params, dataset, max_completion)?;
    let fit_ppl = fit_perplexity(params, dataset)?;
    let prompts: Vec<String> = dataset.examples.iter().map(|e| e.prompt.clone()).collect();
    let retention_ppl =
        retention_perplexity(base, params, &prompts, temperature, max_completion, seed)?;
    let profiles = rollout_profiles(params, base, &prompts, temperature, max_completion, seed)?;
    let jsd: Vec<f64> = profiles.iter().map(|p| p.mean_jsd).collect();
    let mut total_jsd = 0.0;
    let mut total_tokens = 0usize;
    for p in &profiles {
        total_jsd += p.mean_jsd * p.completion_len as f64;
        total_tokens += p.completion_len;
    }
    let mut flags = Vec::new();
    if !fit_ppl.is_finite() {
        flags.push("fit_ppl_infinite".to_string());
    }
    if !retention_ppl.is_finite() {
        flags.push("retention_ppl_infinite".to_string());
    }
    Ok((
        EvalReport {
            accuracy,
            fit_ppl,
            retention_ppl,
            mean_token_jsd: total_jsd / total_tokens.max(1) as f64,
            jsd_histogram: jsd_histogram(&jsd),
            n_examples: dataset.examples.len(),
            seed,
            flags,
        },
        profiles,
    ))
}
