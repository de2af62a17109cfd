//! Synthetic supervised tasks, auxiliary context construction, and
//! positive/negative supervision pairs.
//!
//! Every task has a deterministic checker that derives the expected answer
//! from the prompt alone, so gold answers are verifiable and corrupted
//! negatives can be certified to parse yet fail.

use std::collections::BTreeSet;
use std::collections::HashSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tokens::{Vocab, EOS, SEP};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reverse,
    ModularArith,
    ExprEval,
    ToolFormat,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Reverse => "reverse",
            TaskKind::ModularArith => "modular_arith",
            TaskKind::ExprEval => "expr_eval",
            TaskKind::ToolFormat => "tool_format",
        }
    }

    pub const ALL: [TaskKind; 4] = [
        TaskKind::Reverse,
        TaskKind::ModularArith,
        TaskKind::ExprEval,
        TaskKind::ToolFormat,
    ];
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<TaskKind> {
        match s {
            "reverse" => Ok(TaskKind::Reverse),
            "modular_arith" => Ok(TaskKind::ModularArith),
            "expr_eval" => Ok(TaskKind::ExprEval),
            "tool_format" => Ok(TaskKind::ToolFormat),
            other => Err(Error::Config(format!("unsupported task_kind: {other}"))),
        }
    }
}

/// One supervised example: a prompt, its gold answer, and optionally a
/// well-formed wrong answer used as contrastive supervision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub prompt: String,
    pub gold: String,
    pub negative: Option<String>,
    pub task_kind: TaskKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskDataset {
    pub examples: Vec<Example>,
    pub split: Split,
    pub seed: u64,
    pub alphabet: String,
}

impl TaskDataset {
    /// One JSON object per example, newline-delimited.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, split: Split, seed: u64) -> Result<TaskDataset> {
        let examples = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str::<Example>(l).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskDataset {
            examples,
            split,
            seed,
            alphabet: crate::tokens::ALPHABET.to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

const REVERSE_LETTERS: &[u8] = b"abcdefghij";
const TOOL_VERBS: [&str; 7] = ["get", "set", "add", "del", "find", "list", "ping"];
const TOOL_KEYS: [&str; 6] = ["x", "y", "id", "key", "val", "n"];

fn gen_prompt_gold(kind: TaskKind, rng: &mut ChaCha8Rng) -> (String, String) {
    match kind {
        TaskKind::Reverse => {
            // distinct letters, so each character pins a unique position
            let len = rng.random_range(3..=5usize);
            let mut pool: Vec<u8> = REVERSE_LETTERS.to_vec();
            for i in 0..len {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            let s: String = pool[..len].iter().map(|&b| b as char).collect();
            let gold: String = s.chars().rev().collect();
            (format!("rev: {s}"), gold)
        }
        TaskKind::ModularArith => {
            let a = rng.random_range(0..=50u32);
            let b = rng.random_range(0..=50u32);
            let m = rng.random_range(2..=12u32);
            (format!("{a}+{b} mod {m} ="), ((a + b) % m).to_string())
        }
        TaskKind::ExprEval => {
            let d = |rng: &mut ChaCha8Rng| rng.random_range(0..=9i64);
            let (a, b, c) = (d(rng), d(rng), d(rng));
            let form = rng.random_range(0..7u32);
            let expr = match form {
                0 => format!("{a}+{b}"),
                1 => format!("{a}*{b}"),
                2 => format!("{a}-{b}"),
                3 => format!("({a}+{b})*{c}"),
                4 => format!("{a}*{b}+{c}"),
                5 => format!("({a}-{b})*{c}"),
                _ => format!("{a}+{b}*{c}"),
            };
            let value = eval_expr(&expr).expect("generated expression evaluates");
            (format!("{expr} ="), value.to_string())
        }
        TaskKind::ToolFormat => {
            let verb = TOOL_VERBS[rng.random_range(0..TOOL_VERBS.len())];
            let k1 = rng.random_range(0..TOOL_KEYS.len());
            let mut k2 = rng.random_range(0..TOOL_KEYS.len() - 1);
            if k2 >= k1 {
                k2 += 1;
            }
            let (k1, k2) = (TOOL_KEYS[k1], TOOL_KEYS[k2]);
            let v1 = rng.random_range(0..=99u32);
            let v2 = rng.random_range(0..=99u32);
            (
                format!("tool: {verb} {k1}={v1} {k2}={v2}"),
                format!("{verb}({k1}={v1},{k2}={v2})"),
            )
        }
    }
}

fn generate_unique(
    kind: TaskKind,
    n: usize,
    seed: u64,
    split: Split,
    taken: &mut HashSet<String>,
) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split_tag = match split {
        Split::Train => "train",
        Split::Eval => "eval",
    };
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > n.saturating_mul(1000) + 10_000 {
            return Err(Error::Config(format!(
                "could not generate {n} distinct {} prompts",
                kind.as_str()
            )));
        }
        let (prompt, gold) = gen_prompt_gold(kind, &mut rng);
        if !taken.insert(prompt.clone()) {
            continue;
        }
        debug_assert!(check_answer(kind, &prompt, &gold));
        out.push(Example {
            id: format!("{}-{}-{}-{:05}", kind.as_str(), split_tag, seed, out.len()),
            prompt,
            gold,
            negative: None,
            task_kind: kind,
        });
    }
    Ok(out)
}

/// Generates `n` examples with verifiable gold answers; deterministic in
/// `seed`, prompts distinct within the dataset.
pub fn generate_task(kind: TaskKind, n: usize, seed: u64) -> Result<TaskDataset> {
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let mut taken = HashSet::new();
    let examples = generate_unique(kind, n, seed, Split::Train, &mut taken)?;
    Ok(TaskDataset {
        examples,
        split: Split::Train,
        seed,
        alphabet: crate::tokens::ALPHABET.to_string(),
    })
}

/// Generates a train/eval pair with prompts disjoint across the two splits.
pub fn generate_split_pair(
    kind: TaskKind,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<(TaskDataset, TaskDataset)> {
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Config("split sizes must be >= 1".into()));
    }
    let mut taken = HashSet::new();
    let train = generate_unique(kind, n_train, seed, Split::Train, &mut taken)?;
    let eval = generate_unique(kind, n_eval, seed.wrapping_add(1), Split::Eval, &mut taken)?;
    let alphabet = crate::tokens::ALPHABET.to_string();
    Ok((
        TaskDataset {
            examples: train,
            split: Split::Train,
            seed,
            alphabet: alphabet.clone(),
        },
        TaskDataset {
            examples: eval,
            split: Split::Eval,
            seed: seed.wrapping_add(1),
            alphabet,
        },
    ))
}

// ---------------------------------------------------------------------------
// Checkers
// ---------------------------------------------------------------------------

/// Derives the expected answer from the prompt alone.
pub fn expected_answer(kind: TaskKind, prompt: &str) -> Result<String> {
    match kind {
        TaskKind::Reverse => {
            let body = prompt
                .strip_prefix("rev: ")
                .ok_or_else(|| Error::Config(format!("malformed reverse prompt: {prompt}")))?;
            Ok(body.chars().rev().collect())
        }
        TaskKind::ModularArith => {
            let body = prompt
                .strip_suffix(" =")
                .ok_or_else(|| Error::Config(format!("malformed modular prompt: {prompt}")))?;
            let (sum_part, m_part) = body
                .split_once(" mod ")
                .ok_or_else(|| Error::Config(format!("malformed modular prompt: {prompt}")))?;
            let (a, b) = sum_part
                .split_once('+')
                .ok_or_else(|| Error::Config(format!("malformed modular prompt: {prompt}")))?;
            let a: u64 = a
                .parse()
                .map_err(|_| Error::Config(format!("bad operand in: {prompt}")))?;
            let b: u64 = b
                .parse()
                .map_err(|_| Error::Config(format!("bad operand in: {prompt}")))?;
            let m: u64 = m_part
                .parse()
                .map_err(|_| Error::Config(format!("bad modulus in: {prompt}")))?;
            if m == 0 {
                return Err(Error::Config(format!("zero modulus in: {prompt}")));
            }
            Ok(((a + b) % m).to_string())
        }
        TaskKind::ExprEval => {
            let body = prompt
                .strip_suffix(" =")
                .ok_or_else(|| Error::Config(format!("malformed expression prompt: {prompt}")))?;
            Ok(eval_expr(body)?.to_string())
        }
        TaskKind::ToolFormat => {
            let body = prompt
                .strip_prefix("tool: ")
                .ok_or_else(|| Error::Config(format!("malformed tool prompt: {prompt}")))?;
            let mut parts = body.split(' ');
            let verb = parts
                .next()
                .ok_or_else(|| Error::Config(format!("missing verb in: {prompt}")))?;
            let args: Vec<&str> = parts.collect();
            if args.is_empty() || !args.iter().all(|a| a.contains('=')) {
                return Err(Error::Config(format!("malformed tool args in: {prompt}")));
            }
            Ok(format!("{verb}({})", args.join(",")))
        }
    }
}

/// Exact-match task checker: accepts the gold answer, rejects anything else.
pub fn check_answer(kind: TaskKind, prompt: &str, answer: &str) -> bool {
    match expected_answer(kind, prompt) {
        Ok(expected) => expected == answer,
        Err(_) => false,
    }
}

/// Whether `answer` is well-formed for the task's output format, independent
/// of correctness.
pub fn parses_as_answer(kind: TaskKind, answer: &str) -> bool {
    match kind {
        TaskKind::Reverse => {
            !answer.is_empty() && answer.bytes().all(|b| b.is_ascii_lowercase())
        }
        TaskKind::ModularArith => is_decimal(answer, false),
        TaskKind::ExprEval => is_decimal(answer, true),
        TaskKind::ToolFormat => parse_tool_call(answer).is_some(),
    }
}

fn is_decimal(s: &str, allow_negative: bool) -> bool {
    let digits = match s.strip_prefix('-') {
        Some(rest) if allow_negative => rest,
        Some(_) => return false,
        None => s,
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return false;
    }
    // no leading zeros except for "0" itself
    digits.len() == 1 || !digits.starts_with('0')
}

fn parse_tool_call(s: &str) -> Option<(String, Vec<(String, String)>)> {
    let open = s.find('(')?;
    let verb = &s[..open];
    if verb.is_empty() || !verb.bytes().all(|b| b.is_ascii_lowercase()) {
        return None;
    }
    let inner = s[open + 1..].strip_suffix(')')?;
    let mut args = Vec::new();
    for pair in inner.split(',') {
        let (k, v) = pair.split_once('=')?;
        if k.is_empty() || v.is_empty() {
            return None;
        }
        args.push((k.to_string(), v.to_string()));
    }
    if args.is_empty() {
        return None;
    }
    Some((verb.to_string(), args))
}

/// Evaluates `+ - *` arithmetic over single-digit operands with optional
/// parentheses and standard precedence.
fn eval_expr(src: &str) -> Result<i64> {
    struct P<'a> {
        b: &'a [u8],
        i: usize,
    }
    impl<'a> P<'a> {
        fn peek(&self) -> Option<u8> {
            self.b.get(self.i).copied()
        }
        fn expr(&mut self) -> Result<i64> {
            let mut v = self.term()?;
            while let Some(op @ (b'+' | b'-')) = self.peek() {
                self.i += 1;
                let rhs = self.term()?;
                v = if op == b'+' { v + rhs } else { v - rhs };
            }
            Ok(v)
        }
        fn term(&mut self) -> Result<i64> {
            let mut v = self.factor()?;
            while self.peek() == Some(b'*') {
                self.i += 1;
                v *= self.factor()?;
            }
            Ok(v)
        }
        fn factor(&mut self) -> Result<i64> {
            match self.peek() {
                Some(b'(') => {
                    self.i += 1;
                    let v = self.expr()?;
                    if self.peek() != Some(b')') {
                        return Err(Error::Config("unbalanced parenthesis".into()));
                    }
                    self.i += 1;
                    Ok(v)
                }
                Some(d) if d.is_ascii_digit() => {
                    self.i += 1;
                    Ok((d - b'0') as i64)
                }
                other => Err(Error::Config(format!("unexpected token {other:?}"))),
            }
        }
    }
    let mut p = P {
        b: src.as_bytes(),
        i: 0,
    };
    let v = p.expr()?;
    if p.i != p.b.len() {
        return Err(Error::Config(format!("trailing input in expression: {src}")));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Contexts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextStrategy {
    Retrieval,
    Random,
    Induction,
}

/// The primary condition `c*` (always the example's own demonstration) plus
/// K auxiliary conditions used as reliability probes.
#[derive(Debug, Clone)]
pub struct ContextSet {
    pub primary: Vec<u32>,
    pub auxiliaries: Vec<Vec<u32>>,
    pub strategy: ContextStrategy,
}

/// Renders a demonstration block: `prompt [SEP] answer [EOS]`.
pub fn render_demo(prompt: &str, answer: &str) -> Vec<u32> {
    let v = Vocab::reference();
    let mut out = v.encode(prompt).expect("prompt in alphabet");
    out.push(SEP);
    out.extend(v.encode(answer).expect("answer in alphabet"));
    out.push(EOS);
    out
}

/// Renders the primary condition: `[SEP] answer [EOS]`. The demonstration's
/// prompt is the query prompt itself, which follows the condition in every
/// scored sequence, so only the answer block is embedded.
pub fn render_primary(answer: &str) -> Vec<u32> {
    let v = Vocab::reference();
    let mut out = vec![SEP];
    out.extend(v.encode(answer).expect("answer in alphabet"));
    out.push(EOS);
    out
}

fn render_instruction(text: &str) -> Vec<u32> {
    let v = Vocab::reference();
    let mut out = v.encode(text).expect("instruction in alphabet");
    out.push(EOS);
    out
}

/// Fixed instruction templates standing in for model-induced task
/// descriptions.
pub fn induction_templates(kind: TaskKind) -> &'static [&'static str] {
    match kind {
        TaskKind::Reverse => &[
            "write the characters of the input in reverse order",
            "output the input string backwards",
            "reverse the letters that appear after the colon",
            "answer with the same letters in opposite order",
            "produce the mirror image of the given string",
        ],
        TaskKind::ModularArith => &[
            "add the two numbers and answer with the remainder after dividing",
            "compute the sum and reduce it modulo the given base",
            "answer the sum of the two values wrapped around the modulus",
            "give the remainder of the addition",
        ],
        TaskKind::ExprEval => &[
            "evaluate the arithmetic expression and answer with the value",
            "compute the result of the calculation",
            "apply the usual precedence rules and give the numeric answer",
            "work out the expression and reply with one number",
        ],
        TaskKind::ToolFormat => &[
            "rewrite the request as a canonical tool call with the arguments in order",
            "answer with the function call form of the command",
            "turn the instruction into a call with comma separated arguments",
            "emit the tool invocation for the request",
        ],
    }
}

/// Token-bigram Jaccard similarity between two prompts.
pub fn bigram_jaccard(a: &str, b: &str) -> f64 {
    let v = Vocab::reference();
    let ta = v.encode(a).unwrap_or_default();
    let tb = v.encode(b).unwrap_or_default();
    let sa: BTreeSet<(u32, u32)> = ta.windows(2).map(|w| (w[0], w[1])).collect();
    let sb: BTreeSet<(u32, u32)> = tb.windows(2).map(|w| (w[0], w[1])).collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Builds the primary and auxiliary conditions for one example.
///
/// Retrieval ranks pool prompts by token-bigram Jaccard similarity with ties
/// broken by id order; random draws uniformly without replacement; induction
/// cycles through the fixed instruction templates. The target example is
/// never used as an auxiliary.
pub fn build_contexts(
    example: &Example,
    pool: &TaskDataset,
    strategy: ContextStrategy,
    k: usize,
    seed: u64,
) -> Result<ContextSet> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    let candidates: Vec<&Example> = pool
        .examples
        .iter()
        .filter(|e| e.id != example.id)
        .collect();
    let auxiliaries: Vec<Vec<u32>> = match strategy {
        ContextStrategy::Retrieval => {
            if k > candidates.len() {
                return Err(Error::Config(format!(
                    "K={k} exceeds pool of {} under retrieval",
                    candidates.len()
                )));
            }
            let mut scored: Vec<(f64, &Example)> = candidates
                .iter()
                .map(|e| (bigram_jaccard(&example.prompt, &e.prompt), *e))
                .collect();
            scored.sort_by(|(sa, ea), (sb, eb)| {
                sb.partial_cmp(sa)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| ea.id.cmp(&eb.id))
            });
            scored
                .iter()
                .take(k)
                .map(|(_, e)| render_demo(&e.prompt, &e.gold))
                .collect()
        }
        ContextStrategy::Random => {
            if k > candidates.len() {
                return Err(Error::Config(format!(
                    "K={k} exceeds pool of {} under random",
                    candidates.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut indices: Vec<usize> = (0..candidates.len()).collect();
            // partial Fisher-Yates: first k positions are the draws
            for i in 0..k {
                let j = rng.random_range(i..indices.len());
                indices.swap(i, j);
            }
            indices[..k]
                .iter()
                .map(|&i| render_demo(&candidates[i].prompt, &candidates[i].gold))
                .collect()
        }
        ContextStrategy::Induction => {
            let templates = induction_templates(example.task_kind);
            (0..k)
                .map(|i| render_instruction(templates[i % templates.len()]))
                .collect()
        }
    };
    let vocab_len = |ctx: &Vec<u32>| ctx.len();
    let prompt_len = Vocab::reference().encode(&example.prompt)?.len();
    for ctx in &auxiliaries {
        if vocab_len(ctx) + prompt_len + 2 > crate::model::REFERENCE_WINDOW {
            return Err(Error::Window(format!(
                "auxiliary context of {} tokens does not fit the window",
                ctx.len()
            )));
        }
    }
    Ok(ContextSet {
        primary: render_primary(&example.gold),
        auxiliaries,
        strategy,
    })
}

// ---------------------------------------------------------------------------
// Negatives
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    AnswerPerturb,
    StepCorrupt,
    LexicalSwap,
}

fn distinct_permutations(gold: &str) -> Vec<String> {
    // answers here are at most 5 characters, so full enumeration is cheap
    let chars: Vec<char> = gold.chars().collect();
    let mut out = BTreeSet::new();
    permute(&mut chars.clone(), 0, &mut out);
    out.remove(gold);
    out.into_iter().collect()
}

fn permute(chars: &mut Vec<char>, at: usize, out: &mut BTreeSet<String>) {
    if at == chars.len() {
        out.insert(chars.iter().collect());
        return;
    }
    for i in at..chars.len() {
        chars.swap(at, i);
        permute(chars, at + 1, out);
        chars.swap(at, i);
    }
}

fn substitute_letter(gold: &str, rng: &mut ChaCha8Rng) -> String {
    let chars: Vec<char> = gold.chars().collect();
    let pos = rng.random_range(0..chars.len());
    let mut candidates: Vec<char> = REVERSE_LETTERS
        .iter()
        .map(|&b| b as char)
        .filter(|&c| c != chars[pos])
        .collect();
    let pick = rng.random_range(0..candidates.len());
    let mut out = chars;
    out[pos] = candidates.remove(pick);
    out.into_iter().collect()
}

fn modulus_of(prompt: &str) -> Result<u64> {
    let body = prompt
        .strip_suffix(" =")
        .and_then(|b| b.split_once(" mod "))
        .map(|(_, m)| m)
        .ok_or_else(|| Error::Config(format!("malformed modular prompt: {prompt}")))?;
    body.parse()
        .map_err(|_| Error::Config(format!("bad modulus in: {prompt}")))
}

fn swap_expr_operator(prompt: &str, rng: &mut ChaCha8Rng) -> Option<String> {
    let body = prompt.strip_suffix(" =")?;
    let ops: Vec<usize> = body
        .bytes()
        .enumerate()
        .filter(|(_, b)| matches!(b, b'+' | b'-' | b'*'))
        .map(|(i, _)| i)
        .collect();
    if ops.is_empty() {
        return None;
    }
    let mut order = ops;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let gold = eval_expr(body).ok()?;
    for &pos in &order {
        let mut bytes = body.as_bytes().to_vec();
        bytes[pos] = match bytes[pos] {
            b'+' => b'*',
            b'*' => b'+',
            b'-' => b'+',
            _ => unreachable!(),
        };
        let mutated = String::from_utf8(bytes).ok()?;
        if let Ok(v) = eval_expr(&mutated) {
            if v != gold {
                return Some(v.to_string());
            }
        }
    }
    None
}

/// Produces a wrong answer that still parses under the task's output format;
/// deterministic in `seed`.
pub fn make_negative(example: &Example, corruption: Corruption, seed: u64) -> Result<String> {
    if example.gold.is_empty() {
        return Err(Error::Config("gold answer is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = example.task_kind;
    let prompt = &example.prompt;
    let gold = &example.gold;

    let candidate = |cand: String| -> Option<String> {
        (parses_as_answer(kind, &cand) && !check_answer(kind, prompt, &cand)).then_some(cand)
    };

    for _ in 0..100 {
        let cand = match (kind, corruption) {
            (TaskKind::Reverse, Corruption::AnswerPerturb) => {
                let perms = distinct_permutations(gold);
                if perms.is_empty() {
                    substitute_letter(gold, &mut rng)
                } else {
                    perms[rng.random_range(0..perms.len())].clone()
                }
            }
            (TaskKind::Reverse, Corruption::StepCorrupt) => {
                let all_equal = gold.chars().all(|c| Some(c) == gold.chars().next());
                if gold.len() < 2 || all_equal {
                    substitute_letter(gold, &mut rng)
                } else {
                    let mut chars: Vec<char> = gold.chars().collect();
                    let i = rng.random_range(0..chars.len() - 1);
                    chars.swap(i, i + 1);
                    chars.into_iter().collect()
                }
            }
            (TaskKind::Reverse, Corruption::LexicalSwap) => {
                let all_equal = gold.chars().all(|c| Some(c) == gold.chars().next());
                if gold.len() < 2 || all_equal {
                    substitute_letter(gold, &mut rng)
                } else {
                    let mut chars: Vec<char> = gold.chars().collect();
                    let i = rng.random_range(0..chars.len());
                    let mut j = rng.random_range(0..chars.len() - 1);
                    if j >= i {
                        j += 1;
                    }
                    chars.swap(i, j);
                    chars.into_iter().collect()
                }
            }
            (TaskKind::ModularArith, Corruption::AnswerPerturb) => {
                let m = modulus_of(prompt)?;
                let r: u64 = gold.parse().map_err(|_| {
                    Error::Config(format!("gold {gold} is not a modular answer"))
                })?;
                let k = rng.random_range(1..m);
                ((r + k) % m).to_string()
            }
            (TaskKind::ModularArith, Corruption::StepCorrupt) => {
                let m = modulus_of(prompt)?;
                let r: u64 = gold.parse().map_err(|_| {
                    Error::Config(format!("gold {gold} is not a modular answer"))
                })?;
                let delta = if rng.random_range(0..2u32) == 0 { 1 } else { m - 1 };
                ((r + delta) % m).to_string()
            }
            (TaskKind::ModularArith, Corruption::LexicalSwap) => {
                let m = modulus_of(prompt)?;
                let digits: Vec<char> = gold.chars().collect();
                let swapped = if digits.len() >= 2 {
                    let mut d = digits;
                    d.swap(0, 1);
                    let s: String = d.into_iter().collect();
                    match s.parse::<u64>() {
                        Ok(v) if v < m && is_decimal(&s, false) && s != *gold => Some(s),
                        _ => None,
                    }
                } else {
                    None
                };
                swapped.unwrap_or_else(|| {
                    let r: u64 = gold.parse().unwrap_or(0);
                    let k = rng.random_range(1..m);
                    ((r + k) % m).to_string()
                })
            }
            (TaskKind::ExprEval, Corruption::AnswerPerturb) => {
                let v: i64 = gold
                    .parse()
                    .map_err(|_| Error::Config(format!("gold {gold} is not an integer")))?;
                let mut k = rng.random_range(-9..=9i64);
                if k == 0 {
                    k = 1;
                }
                (v + k).to_string()
            }
            (TaskKind::ExprEval, Corruption::StepCorrupt) => {
                let v: i64 = gold.parse().unwrap_or(0);
                swap_expr_operator(prompt, &mut rng).unwrap_or_else(|| (v + 1).to_string())
            }
            (TaskKind::ExprEval, Corruption::LexicalSwap) => {
                let v: i64 = gold
                    .parse()
                    .map_err(|_| Error::Config(format!("gold {gold} is not an integer")))?;
                let digits: Vec<char> = gold.chars().filter(|c| c.is_ascii_digit()).collect();
                let swapped = if digits.len() >= 2 {
                    let sign = if gold.starts_with('-') { "-" } else { "" };
                    let mut d = digits;
                    d.swap(0, 1);
                    let s: String = d.into_iter().collect();
                    let s = format!("{sign}{}", s.trim_start_matches('0'));
                    (!s.is_empty() && s != "-" && s != *gold).then_some(s)
                } else {
                    None
                };
                swapped.unwrap_or_else(|| (v + 1).to_string())
            }
            (TaskKind::ToolFormat, Corruption::AnswerPerturb) => {
                let (verb, mut args) = parse_tool_call(gold)
                    .ok_or_else(|| Error::Config(format!("gold {gold} is not a tool call")))?;
                let i = rng.random_range(0..args.len());
                let v: i64 = args[i].1.parse().unwrap_or(0);
                let bump = rng.random_range(1..=9i64);
                args[i].1 = (v + bump).to_string();
                render_tool_call(&verb, &args)
            }
            (TaskKind::ToolFormat, Corruption::StepCorrupt) => {
                let (verb, mut args) = parse_tool_call(gold)
                    .ok_or_else(|| Error::Config(format!("gold {gold} is not a tool call")))?;
                if args.len() >= 2 && args[0].1 != args[1].1 {
                    let tmp = args[0].1.clone();
                    args[0].1 = args[1].1.clone();
                    args[1].1 = tmp;
                } else {
                    let v: i64 = args[0].1.parse().unwrap_or(0);
                    args[0].1 = (v + 1).to_string();
                }
                render_tool_call(&verb, &args)
            }
            (TaskKind::ToolFormat, Corruption::LexicalSwap) => {
                let (verb, mut args) = parse_tool_call(gold)
                    .ok_or_else(|| Error::Config(format!("gold {gold} is not a tool call")))?;
                if args.len() >= 2 {
                    args.swap(0, 1);
                } else {
                    let v: i64 = args[0].1.parse().unwrap_or(0);
                    args[0].1 = (v + 1).to_string();
                }
                render_tool_call(&verb, &args)
            }
        };
        if let Some(neg) = candidate(cand) {
            return Ok(neg);
        }
    }
    Err(Error::Corruption(format!(
        "could not corrupt {gold:?} for {} with {corruption:?}",
        kind.as_str()
    )))
}

fn render_tool_call(verb: &str, args: &[(String, String)]) -> String {
    let parts: Vec<String> = args.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("{verb}({})", parts.join(","))
}

/// Fills the `negative` field of every example, drawing sub-seeds from one
/// deterministic stream in example order.
pub fn populate_negatives(
    dataset: &mut TaskDataset,
    corruption: Corruption,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ex in &mut dataset.examples {
        let sub = rng.next_u64();
        ex.negative = Some(make_negative(ex, corruption, sub)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_format_and_gold() {
        let ds = generate_task(TaskKind::Reverse, 10, 7).unwrap();
        for ex in &ds.examples {
            let body = ex.prompt.strip_prefix("rev: ").unwrap();
            assert_eq!(ex.gold, body.chars().rev().collect::<String>());
            assert!(check_answer(TaskKind::Reverse, &ex.prompt, &ex.gold));
        }
    }

    #[test]
    fn modular_checker_matches_hand_arithmetic() {
        // (17 + 25) mod 10 = 2
        assert_eq!(
            expected_answer(TaskKind::ModularArith, "17+25 mod 10 =").unwrap(),
            "2"
        );
        assert!(check_answer(TaskKind::ModularArith, "17+25 mod 10 =", "2"));
        assert!(!check_answer(TaskKind::ModularArith, "17+25 mod 10 =", "3"));
    }

    #[test]
    fn expression_evaluator_handles_precedence_and_parens() {
        assert_eq!(eval_expr("(3+4)*2").unwrap(), 14);
        assert_eq!(eval_expr("3+4*2").unwrap(), 11);
        assert_eq!(eval_expr("(0-9)*9").unwrap(), -81);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_task(TaskKind::Reverse, 100, 7).unwrap();
        let b = generate_task(TaskKind::Reverse, 100, 7).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let c = generate_task(TaskKind::Reverse, 100, 8).unwrap();
        assert_ne!(a.to_jsonl(), c.to_jsonl());
    }

    #[test]
    fn all_kinds_generate_verifiable_gold() {
        for kind in TaskKind::ALL {
            let ds = generate_task(kind, 50, 3).unwrap();
            for ex in &ds.examples {
                assert!(
                    check_answer(kind, &ex.prompt, &ex.gold),
                    "{}: {} -> {}",
                    kind.as_str(),
                    ex.prompt,
                    ex.gold
                );
                assert!(parses_as_answer(kind, &ex.gold));
                assert!(!ex.prompt.is_empty() && !ex.gold.is_empty());
            }
        }
    }

    #[test]
    fn split_pair_is_disjoint_by_id_and_prompt() {
        let (train, eval) = generate_split_pair(TaskKind::Reverse, 200, 50, 7).unwrap();
        let train_ids: HashSet<_> = train.examples.iter().map(|e| &e.id).collect();
        let train_prompts: HashSet<_> = train.examples.iter().map(|e| &e.prompt).collect();
        for ex in &eval.examples {
            assert!(!train_ids.contains(&ex.id));
            assert!(!train_prompts.contains(&ex.prompt));
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let ds = generate_task(TaskKind::ToolFormat, 20, 5).unwrap();
        let text = ds.to_jsonl();
        let back = TaskDataset::from_jsonl(&text, Split::Train, 5).unwrap();
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn retrieval_ranks_duplicate_prompt_first() {
        let mut pool = generate_task(TaskKind::Reverse, 10, 1).unwrap();
        let target = pool.examples[0].clone();
        // plant an exact duplicate prompt under a different id
        let mut dup = target.clone();
        dup.id = "reverse-train-1-dup".to_string();
        pool.examples.push(dup.clone());
        let ctx = build_contexts(&target, &pool, ContextStrategy::Retrieval, 3, 0).unwrap();
        assert_eq!(ctx.auxiliaries[0], render_demo(&dup.prompt, &dup.gold));
    }

    #[test]
    fn retrieval_matches_brute_force_ranking() {
        // hand-built pool with graded bigram overlap against "rev: abcd"
        let mk = |id: &str, prompt: &str| Example {
            id: id.into(),
            prompt: prompt.into(),
            gold: expected_answer(TaskKind::Reverse, prompt).unwrap(),
            negative: None,
            task_kind: TaskKind::Reverse,
        };
        let target = mk("t", "rev: abcd");
        let pool = TaskDataset {
            examples: vec![
                target.clone(),
                mk("p0", "rev: abce"),
                mk("p1", "rev: abcd"),
                mk("p2", "rev: jjjj"),
                mk("p3", "rev: abij"),
                mk("p4", "rev: bcda"),
            ],
            split: Split::Train,
            seed: 0,
            alphabet: crate::tokens::ALPHABET.into(),
        };
        let ctx = build_contexts(&target, &pool, ContextStrategy::Retrieval, 3, 0).unwrap();
        // brute-force oracle: exhaustive pairwise similarity, ties by id
        let mut scored: Vec<(f64, &Example)> = pool.examples[1..]
            .iter()
            .map(|e| (bigram_jaccard(&target.prompt, &e.prompt), e))
            .collect();
        scored.sort_by(|(sa, ea), (sb, eb)| {
            sb.partial_cmp(sa).unwrap().then_with(|| ea.id.cmp(&eb.id))
        });
        let expect: Vec<Vec<u32>> = scored
            .iter()
            .take(3)
            .map(|(_, e)| render_demo(&e.prompt, &e.gold))
            .collect();
        assert_eq!(ctx.auxiliaries, expect);
    }

    #[test]
    fn retrieval_matches_brute_force_on_random_pools() {
        for seed in 0..5u64 {
            let pool = generate_task(TaskKind::Reverse, 50, seed).unwrap();
            let target = pool.examples[3].clone();
            let ctx = build_contexts(&target, &pool, ContextStrategy::Retrieval, 5, 0).unwrap();
            let mut scored: Vec<(f64, &Example)> = pool
                .examples
                .iter()
                .filter(|e| e.id != target.id)
                .map(|e| (bigram_jaccard(&target.prompt, &e.prompt), e))
                .collect();
            scored.sort_by(|(sa, ea), (sb, eb)| {
                sb.partial_cmp(sa).unwrap().then_with(|| ea.id.cmp(&eb.id))
            });
            let expect: Vec<Vec<u32>> = scored
                .iter()
                .take(5)
                .map(|(_, e)| render_demo(&e.prompt, &e.gold))
                .collect();
            assert_eq!(ctx.auxiliaries, expect);
        }
    }

    #[test]
    fn random_contexts_are_deterministic_and_exclude_target() {
        let pool = generate_task(TaskKind::ModularArith, 30, 2).unwrap();
        let target = pool.examples[4].clone();
        let a = build_contexts(&target, &pool, ContextStrategy::Random, 4, 99).unwrap();
        let b = build_contexts(&target, &pool, ContextStrategy::Random, 4, 99).unwrap();
        assert_eq!(a.auxiliaries, b.auxiliaries);
        let own = render_demo(&target.prompt, &target.gold);
        assert!(a.auxiliaries.iter().all(|c| *c != own));
        assert_eq!(a.auxiliaries.len(), 4);
    }

    #[test]
    fn induction_provides_k_instruction_blocks() {
        let pool = generate_task(TaskKind::Reverse, 5, 2).unwrap();
        let target = pool.examples[0].clone();
        let ctx = build_contexts(&target, &pool, ContextStrategy::Induction, 7, 0).unwrap();
        assert_eq!(ctx.auxiliaries.len(), 7);
        // templates cycle once exhausted
        assert_eq!(ctx.auxiliaries[5], ctx.auxiliaries[0]);
    }

    #[test]
    fn k_exceeding_pool_is_a_config_error() {
        let pool = generate_task(TaskKind::Reverse, 3, 2).unwrap();
        let target = pool.examples[0].clone();
        for strategy in [ContextStrategy::Retrieval, ContextStrategy::Random] {
            let err = build_contexts(&target, &pool, strategy, 5, 0).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
    }

    #[test]
    fn primary_embeds_own_demonstration() {
        let pool = generate_task(TaskKind::Reverse, 5, 2).unwrap();
        let target = pool.examples[1].clone();
        let ctx = build_contexts(&target, &pool, ContextStrategy::Random, 2, 0).unwrap();
        assert_eq!(ctx.primary, render_primary(&target.gold));
    }

    #[test]
    fn negatives_parse_and_fail_checker_across_kinds_and_corruptions() {
        for kind in TaskKind::ALL {
            let ds = generate_task(kind, 84, 11).unwrap();
            for corruption in [
                Corruption::AnswerPerturb,
                Corruption::StepCorrupt,
                Corruption::LexicalSwap,
            ] {
                for (i, ex) in ds.examples.iter().enumerate() {
                    let neg = make_negative(ex, corruption, i as u64).unwrap();
                    assert!(parses_as_answer(kind, &neg), "{neg:?} should parse");
                    assert!(
                        !check_answer(kind, &ex.prompt, &neg),
                        "{neg:?} passes checker for {}",
                        ex.prompt
                    );
                }
            }
        }
    }

    #[test]
    fn thousand_example_corruption_sweep() {
        let mut ds = generate_task(TaskKind::Reverse, 1000, 13).unwrap();
        populate_negatives(&mut ds, Corruption::AnswerPerturb, 5).unwrap();
        for ex in &ds.examples {
            let neg = ex.negative.as_ref().unwrap();
            assert!(parses_as_answer(TaskKind::Reverse, neg));
            assert!(!check_answer(TaskKind::Reverse, &ex.prompt, neg));
            assert_ne!(neg, &ex.gold);
        }
    }

    #[test]
    fn reverse_perturbation_is_a_seeded_permutation() {
        let ex = Example {
            id: "x".into(),
            prompt: "rev: abc".into(),
            gold: "cba".into(),
            negative: None,
            task_kind: TaskKind::Reverse,
        };
        let neg = make_negative(&ex, Corruption::AnswerPerturb, 7).unwrap();
        // oracle: enumerate all distinct permutations of the gold answer
        let perms = distinct_permutations("cba");
        assert!(perms.contains(&neg));
        assert_ne!(neg, "cba");
        assert!(!check_answer(TaskKind::Reverse, &ex.prompt, &neg));
        // determinism in seed
        assert_eq!(neg, make_negative(&ex, Corruption::AnswerPerturb, 7).unwrap());
    }

    #[test]
    fn single_digit_modular_perturb_stays_in_range() {
        let ex = Example {
            id: "m".into(),
            prompt: "1+1 mod 2 =".into(),
            gold: "0".into(),
            negative: None,
            task_kind: TaskKind::ModularArith,
        };
        let neg = make_negative(&ex, Corruption::AnswerPerturb, 3).unwrap();
        assert_eq!(neg, "1");
    }
}
