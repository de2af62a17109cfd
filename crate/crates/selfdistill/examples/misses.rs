// prints the conditioned teacher's argmax misses by position
use selfdistill::corpus::{generate_task, render_primary, TaskKind};
use selfdistill::model::ArchConfig;
use selfdistill::policy::{init_policy, rollout_prefix, score_distributions, Trajectory};
use selfdistill::tokens::{Vocab, EOS};

fn main() {
    let arch = ArchConfig::default();
    let v = Vocab::reference();
    let ds = generate_task(TaskKind::Reverse, 60, 7).unwrap();
    let params = init_policy::<f64>(&arch, 0).unwrap();
    for ex in ds.examples.iter().take(40) {
        let mut completion = v.encode(&ex.gold).unwrap();
        completion.push(EOS);
        let traj = Trajectory::forced(rollout_prefix(&ex.prompt).unwrap(), completion.clone());
        let demo = render_primary(&ex.gold);
        let cond = score_distributions(&params, &demo, &traj).unwrap();
        for t in 0..completion.len() {
            let row = &cond.logprobs[t * cond.vocab..(t + 1) * cond.vocab];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0 as u32;
            if best != completion[t] {
                let got = if best == EOS { "<eos>".to_string() } else { v.decode(&[best]) };
                let want = if completion[t] == EOS {
                    "<eos>".to_string()
                } else {
                    v.decode(&[completion[t]])
                };
                println!(
                    "prompt {:<12} gold {:<6} pos {t}: predicted {:?} wanted {:?}",
                    ex.prompt, ex.gold, got, want
                );
            }
        }
    }
}
