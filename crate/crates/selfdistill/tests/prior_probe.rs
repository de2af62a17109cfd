//! Probes for the reference initialization's copy prior: the
//! demonstration-conditioned model must prefer demonstrated continuations
//! at step zero, while bare-prompt behaviour stays near chance.

use selfdistill::corpus::{generate_task, render_primary, TaskKind};
use selfdistill::model::ArchConfig;
use selfdistill::policy::{init_policy, rollout_prefix, score_distributions, Trajectory};
use selfdistill::tokens::{Vocab, EOS};

fn gold_trajectory(prompt: &str, gold: &str) -> Trajectory {
    let v = Vocab::reference();
    let mut completion = v.encode(gold).unwrap();
    completion.push(EOS);
    Trajectory::forced(rollout_prefix(prompt).unwrap(), completion)
}

#[test]
fn conditioned_teacher_boosts_gold_tokens_at_init() {
    let arch = ArchConfig::default();
    let ds = generate_task(TaskKind::Reverse, 40, 7).unwrap();
    let mut mean_bare = 0.0f64;
    let mut mean_cond = 0.0f64;
    let mut n = 0.0f64;
    let mut argmax_hits = 0usize;
    let mut argmax_total = 0usize;
    let mut by_pos_hits = [0usize; 8];
    let mut by_pos_total = [0usize; 8];
    for seed in 0..3u64 {
        let params = init_policy::<f32>(&arch, seed).unwrap();
        for ex in ds.examples.iter().take(20) {
            let traj = gold_trajectory(&ex.prompt, &ex.gold);
            let bare = score_distributions(&params, &[], &traj).unwrap();
            let demo = render_primary(&ex.gold);
            let cond = score_distributions(&params, &demo, &traj).unwrap();
            let lp_bare = bare.gather(&traj.completion);
            let lp_cond = cond.gather(&traj.completion);
            // average over the answer characters, excluding EOS
            for t in 0..traj.len() - 1 {
                mean_bare += lp_bare[t] as f64;
                mean_cond += lp_cond[t] as f64;
                n += 1.0;
            }
            // does the conditioned argmax recover the gold character when
            // teacher-forced on the gold prefix?
            for t in 0..traj.len() - 1 {
                let row = &cond.logprobs[t * cond.vocab..(t + 1) * cond.vocab];
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0 as u32;
                if best == traj.completion[t] {
                    argmax_hits += 1;
                    by_pos_hits[t.min(7)] += 1;
                }
                argmax_total += 1;
                by_pos_total[t.min(7)] += 1;
            }
        }
    }
    mean_bare /= n;
    mean_cond /= n;
    let hit_rate = argmax_hits as f64 / argmax_total as f64;
    println!(
        "init gold log-prob: bare {mean_bare:.4} vs conditioned {mean_cond:.4} (boost {:.2} nats, x{:.2}); conditioned argmax hit rate {hit_rate:.3}",
        mean_cond - mean_bare,
        (mean_cond - mean_bare).exp()
    );
    for t in 0..8 {
        if by_pos_total[t] > 0 {
            println!(
                "  position {t}: argmax hit {:.3} ({}/{})",
                by_pos_hits[t] as f64 / by_pos_total[t] as f64,
                by_pos_hits[t],
                by_pos_total[t]
            );
        }
    }
    // the conditioned model must genuinely read the demonstration
    assert!(
        mean_cond - mean_bare > 0.5,
        "conditioned boost too weak: {mean_bare:.4} -> {mean_cond:.4}"
    );
    assert!(hit_rate > 0.3, "conditioned argmax hit rate too weak: {hit_rate:.3}");
}

#[test]
fn bare_prompt_accuracy_stays_near_chance_at_init() {
    let arch = ArchConfig::default();
    let (_, eval) = selfdistill::corpus::generate_split_pair(TaskKind::Reverse, 8, 64, 3).unwrap();
    for seed in 0..3u64 {
        let params = init_policy::<f32>(&arch, seed).unwrap();
        let acc = selfdistill::evalkit::task_accuracy(&params, &eval, 8).unwrap();
        assert!(acc <= 0.01, "seed {seed}: untrained accuracy {acc}");
    }
}
