// quick inspection: greedy decodes + teacher first-char preference
use selfdistill::corpus::{generate_split_pair, render_demo, TaskKind};
use selfdistill::model::ArchConfig;
use selfdistill::params::load_checkpoint;
use selfdistill::policy::*;
use selfdistill::tokens::{Vocab, EOS};

fn main() {
    let dir = std::env::args().nth(1).unwrap();
    let student: selfdistill::params::PolicyParameters<f32> =
        load_checkpoint(std::path::Path::new(&format!("{dir}/student.ckpt"))).unwrap();
    let base: selfdistill::params::PolicyParameters<f32> =
        load_checkpoint(std::path::Path::new(&format!("{dir}/base.ckpt"))).unwrap();
    let (_, eval) = generate_split_pair(TaskKind::Reverse, 512, 64, 11).unwrap();
    let v = Vocab::reference();
    let mut first_char_hits = 0;
    let mut teacher_first_hits = 0;
    for ex in eval.examples.iter().take(20) {
        let decoded = greedy_decode(&student, &ex.prompt, 8).unwrap();
        // teacher: base conditioned on demo; greedy first token
        let demo = render_demo(&ex.prompt, &ex.gold);
        let mut completion = v.encode(&ex.gold).unwrap();
        completion.push(EOS);
        let traj = Trajectory::forced(rollout_prefix(&ex.prompt).unwrap(), completion);
        let trace = score_distributions(&base, &demo, &traj).unwrap();
        let row = &trace.logprobs[..trace.vocab];
        let argmax = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        let teacher_first = v.decode(&[argmax as u32]);
        let gold_first = ex.gold.chars().next().unwrap().to_string();
        if decoded.chars().next().map(|c| c.to_string()) == Some(gold_first.clone()) {
            first_char_hits += 1;
        }
        if teacher_first == gold_first {
            teacher_first_hits += 1;
        }
        if ex.id.ends_with("0") {
            println!("{:<14} gold {:<6} student {:?} teacher1 {:?}", ex.prompt, ex.gold, decoded, teacher_first);
        }
    }
    println!("student first-char hits: {first_char_hits}/20, teacher argmax first-char hits: {teacher_first_hits}/20");
    let _ = ArchConfig::default();
}
