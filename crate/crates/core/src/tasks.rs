//! Seeded generators for the bracket-completion sub-tasks and two-operand
//! arithmetic, with disjoint train/dev/test splits.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{AnswerTokenSet, TokenId, Tokenizer};

pub const PAREN_SPLIT: [usize; 3] = [350, 150, 150];
pub const ARITH_SPLIT: [usize; 3] = [750, 350, 350];
pub const NUM_RANGE: (u32, u32) = (100, 999);
pub const ARITH_MAX: u32 = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubTask {
    OneParen,
    TwoParen,
    ThreeParen,
    FourParen,
}

impl SubTask {
    pub const ALL: [SubTask; 4] = [
        SubTask::OneParen,
        SubTask::TwoParen,
        SubTask::ThreeParen,
        SubTask::FourParen,
    ];

    /// Number of closing parentheses in the answer.
    pub fn depth(self) -> usize {
        self as usize + 1
    }

    pub fn from_depth(depth: usize) -> Option<Self> {
        Self::ALL.get(depth.wrapping_sub(1)).copied()
    }

    pub fn name(self) -> &'static str {
        ["one-paren", "two-paren", "three-paren", "four-paren"][self as usize]
    }

    pub fn prompt(self, num: u32) -> String {
        format!(
            "#print the string {num}\nprint({}{num}",
            "str(".repeat(self.depth() - 1)
        )
    }

    pub fn target_text(self) -> String {
        ")".repeat(self.depth())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ArithOp {
    pub const ALL: [ArithOp; 4] = [ArithOp::Add, ArithOp::Sub, ArithOp::Mul, ArithOp::Div];

    pub fn symbol(self) -> char {
        ['+', '-', '*', '/'][self as usize]
    }

    pub fn name(self) -> &'static str {
        ["add", "sub", "mul", "div"][self as usize]
    }

    /// Result when both operands and the result lie in `[0, ARITH_MAX]` and
    /// division is exact.
    pub fn apply(self, a: u32, b: u32) -> Option<u32> {
        let r = match self {
            ArithOp::Add => a + b,
            ArithOp::Sub => a.checked_sub(b)?,
            ArithOp::Mul => a.checked_mul(b)?,
            ArithOp::Div => {
                if b == 0 || a % b != 0 {
                    return None;
                }
                a / b
            }
        };
        (a <= ARITH_MAX && b <= ARITH_MAX && r <= ARITH_MAX).then_some(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TaskId {
    Paren(SubTask),
    Arith(ArithOp),
}

impl TaskId {
    pub fn all_paren() -> [TaskId; 4] {
        SubTask::ALL.map(TaskId::Paren)
    }

    pub fn all_arith() -> [TaskId; 4] {
        ArithOp::ALL.map(TaskId::Arith)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Paren(s) => s.name(),
            TaskId::Arith(op) => op.name(),
        }
    }

    fn stream(self) -> u64 {
        match self {
            TaskId::Paren(s) => s as u64,
            TaskId::Arith(op) => 4 + op as u64,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SubTask::ALL
            .iter()
            .map(|&t| TaskId::Paren(t))
            .chain(ArithOp::ALL.iter().map(|&o| TaskId::Arith(o)))
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

impl From<TaskId> for String {
    fn from(t: TaskId) -> String {
        t.name().to_string()
    }
}

impl TryFrom<String> for TaskId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub task: TaskId,
    pub split: Split,
    pub prompt: String,
    pub tokens: Vec<TokenId>,
    pub target_token_id: TokenId,
    pub target_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operands: Option<(u32, u32)>,
}

/// Ground-truth token and distractors for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskId,
    pub target: TokenId,
    /// Empty for arithmetic, which is scored by promotion only.
    pub negatives: Vec<TokenId>,
}

impl TaskSpec {
    pub fn paren(subtask: SubTask, answers: &AnswerTokenSet) -> Self {
        let target = answers.closing(subtask.depth());
        Self {
            task: TaskId::Paren(subtask),
            target,
            negatives: answers.ids.iter().copied().filter(|&t| t != target).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskId,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn split_vec(&self, split: Split) -> Vec<Example> {
        self.split(split).cloned().collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.examples {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut examples = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(serde_json::from_str::<Example>(&line)?);
        }
        let task = examples
            .first()
            .map(|e| e.task)
            .ok_or_else(|| Error::Config("empty dataset file".into()))?;
        if examples.iter().any(|e| e.task != task) {
            return Err(Error::Config("dataset file mixes tasks".into()));
        }
        Ok(Self { task, examples })
    }
}

fn rng_for(task: TaskId, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task.stream());
    rng
}

fn split_of(i: usize, sizes: [usize; 3]) -> Split {
    if i < sizes[0] {
        Split::Train
    } else if i < sizes[0] + sizes[1] {
        Split::Dev
    } else {
        Split::Test
    }
}

/// Stack-based check that every `)` closes an earlier `(` and none remain open.
pub fn is_balanced(text: &str) -> bool {
    let mut depth = 0usize;
    for c in text.chars() {
        match c {
            '(' => depth += 1,
            ')' => match depth.checked_sub(1) {
                Some(d) => depth = d,
                None => return false,
            },
            _ => {}
        }
    }
    depth == 0
}

/// 350/150/150 examples with `{num}` sampled without replacement from
/// 100..=999, so the splits never share a number.
pub fn gen_paren_dataset(subtask: SubTask, seed: u64, tok: &Tokenizer) -> Result<Dataset> {
    let task = TaskId::Paren(subtask);
    let target_text = subtask.target_text();
    let target = tok
        .single_token(&target_text)
        .ok_or_else(|| Error::Config(format!("{target_text:?} is not a single token")))?;
    let mut nums: Vec<u32> = (NUM_RANGE.0..=NUM_RANGE.1).collect();
    let mut rng = rng_for(task, seed);
    nums.shuffle(&mut rng);
    let total: usize = PAREN_SPLIT.iter().sum();
    let examples = nums[..total]
        .iter()
        .enumerate()
        .map(|(i, &num)| {
            let prompt = subtask.prompt(num);
            Example {
                task,
                split: split_of(i, PAREN_SPLIT),
                tokens: tok.encode(&prompt),
                prompt,
                target_token_id: target,
                target_text: target_text.clone(),
                num: Some(num),
                operands: None,
            }
        })
        .collect();
    Ok(Dataset { task, examples })
}

/// Positives and negatives for promotion precision/recall of one sub-task.
#[derive(Clone, Debug, PartialEq)]
pub struct BalancedSet {
    pub subtask: SubTask,
    /// Token whose promotion is being measured.
    pub target: TokenId,
    pub positives: Vec<Example>,
    pub negatives: Vec<Example>,
}

/// Positives are the sub-task's train split; the same number of negatives is
/// drawn evenly from the other three train splits, with the remainder going
/// to the lexicographically earliest sub-task names.
pub fn gen_balanced_pr_dataset(subtask: SubTask, train: &[Dataset], seed: u64) -> Result<BalancedSet> {
    let find = |s: SubTask| {
        train
            .iter()
            .find(|d| d.task == TaskId::Paren(s))
            .ok_or_else(|| Error::Config(format!("missing dataset for {}", s.name())))
    };
    let positives = find(subtask)?.split_vec(Split::Train);
    let target = positives
        .first()
        .map(|e| e.target_token_id)
        .ok_or_else(|| Error::Config("empty train split".into()))?;
    let mut others: Vec<SubTask> = SubTask::ALL.into_iter().filter(|&s| s != subtask).collect();
    others.sort_by_key(|s| s.name());
    let n = positives.len();
    let base = n / others.len();
    let extra = n % others.len();
    let mut rng = rng_for(TaskId::Paren(subtask), seed ^ 0x5052_5f4e_4547);
    let mut negatives = Vec::with_capacity(n);
    for (i, s) in others.iter().enumerate() {
        let want = base + usize::from(i < extra);
        let mut pool = find(*s)?.split_vec(Split::Train);
        if pool.len() < want {
            return Err(Error::Config(format!("{} train split too small", s.name())));
        }
        pool.shuffle(&mut rng);
        negatives.extend(pool.into_iter().take(want));
    }
    Ok(BalancedSet {
        subtask,
        target,
        positives,
        negatives,
    })
}

/// Answer token for `result`: the space-prefixed form when it is one token,
/// else the bare form.
fn arith_target(tok: &Tokenizer, result: u32) -> Option<(TokenId, String)> {
    [format!(" {result}"), result.to_string()]
        .into_iter()
        .find_map(|s| tok.single_token(&s).map(|id| (id, s)))
}

/// 750/350/350 prompts `"a op b ="`, operands and result in `[0, 500]`,
/// no operand pair repeated across splits. Pairs whose prompt is not four
/// tokens or whose answer is not a single token are resampled.
pub fn gen_arith_dataset(op: ArithOp, seed: u64, tok: &Tokenizer) -> Result<Dataset> {
    let task = TaskId::Arith(op);
    let mut rng = rng_for(task, seed);
    let total: usize = ARITH_SPLIT.iter().sum();
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(total);
    let mut attempts = 0u64;
    while examples.len() < total {
        attempts += 1;
        if attempts > 50_000_000 {
            return Err(Error::Config(format!("cannot sample enough {} pairs", op.name())));
        }
        let (a, b) = match op {
            // sample the quotient so division pairs are exact by construction
            ArithOp::Div => {
                let b = rng.random_range(1..=ARITH_MAX);
                let q = rng.random_range(0..=ARITH_MAX / b);
                (b * q, b)
            }
            _ => (rng.random_range(0..=ARITH_MAX), rng.random_range(0..=ARITH_MAX)),
        };
        let Some(result) = op.apply(a, b) else { continue };
        if seen.contains(&(a, b)) {
            continue;
        }
        let prompt = format!("{a} {} {b} =", op.symbol());
        let tokens = tok.encode(&prompt);
        if tokens.len() != 4 {
            continue;
        }
        let Some((target, target_text)) = arith_target(tok, result) else { continue };
        seen.insert((a, b));
        examples.push(Example {
            task,
            split: split_of(examples.len(), ARITH_SPLIT),
            prompt,
            tokens,
            target_token_id: target,
            target_text,
            num: None,
            operands: Some((a, b)),
        });
    }
    Ok(Dataset { task, examples })
}

pub fn gen_dataset(task: TaskId, seed: u64, tok: &Tokenizer) -> Result<Dataset> {
    match task {
        TaskId::Paren(s) => gen_paren_dataset(s, seed, tok),
        TaskId::Arith(op) => gen_arith_dataset(op, seed, tok),
    }
}
