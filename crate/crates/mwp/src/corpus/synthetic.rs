//! Deterministic synthetic word-problem generator.
//!
//! Ten template families cover one to five operations. Each family has five
//! paraphrases of its question text; paraphrase `p4` of every family is
//! reserved for held-out evaluation so that a test split can consist of
//! phrasings never seen in training. Free quantities are drawn uniformly
//! from `[2, 999]` so most values appear in only a handful of training
//! expressions, while divisors, unit prices, and per-item scores stay in
//! single digits; draws are re-sampled where a family needs divisibility,
//! parity, or positivity, and every gold expression lists the operands of
//! commutative operators in question order.

use super::{tokenize_text, CorpusError, Dataset, Problem, Split};
use crate::expr;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Family {
    name: &'static str,
    ops: usize,
    expr: &'static str,
    paraphrases: [&'static str; 5],
    sample: fn(&mut ChaCha8Rng) -> Vec<i64>,
}

// Numbers within one problem are drawn pairwise distinct (and at least 3
// where the expression carries a literal 2) so that a number token names a
// single question position.

fn distinct_pair(rng: &mut ChaCha8Rng, lo: i64, hi: i64) -> (i64, i64) {
    let a = rng.random_range(lo..=hi);
    loop {
        let b = rng.random_range(lo..=hi);
        if b != a {
            return (a, b);
        }
    }
}

fn sample_combine(rng: &mut ChaCha8Rng) -> Vec<i64> {
    let (a, b) = distinct_pair(rng, 2, 999);
    vec![a, b]
}

fn sample_left(rng: &mut ChaCha8Rng) -> Vec<i64> {
    let a = rng.random_range(3..=999);
    let b = rng.random_range(2..a);
    vec![a, b]
}

fn sample_pack(rng: &mut ChaCha8Rng) -> Vec<i64> {
    let (a, b) = distinct_pair(rng, 2, 999);
    vec![a, b]
}

fn sample_share(rng: &mut ChaCha8Rng) -> Vec<i64> {
    let b = rng.random_range(2..=12);
    let q = rng.random_range(2..=80);
    vec![b * q, b]
}

fn sample_fence(rng: &mut ChaCha8Rng) -> Vec<i64> {
    let (a, b) = distinct_pair(rng, 3, 999);
    vec![a, b]
}

fn sample_spend(rng: &mut ChaCha8Rng) -> Vec<i64> {
    let (b, c) = distinct_pair(rng, 3, 9);
    let a = rng.random_range(b * c + 1..=999);
    vec![a, b, c]
}

fn sample_average(rng: &mut ChaCha8Rng) -> Vec<i64> {
    let a = rng.random_range(3..=999);
    loop {
        let b0 = rng.random_range(3..=998);
        let b = b0 + (a + b0) % 2;
        if b != a {
            return vec![a, b];
        }
    }
}

fn sample_outing(rng: &mut ChaCha8Rng) -> Vec<i64> {
    loop {
        let nums = vec![
            rng.random_range(2..=99),
            rng.random_range(2..=99),
            rng.random_range(2..=99),
            rng.random_range(2..=99),
        ];
        let mut sorted = nums.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() == nums.len() {
            return nums;
        }
    }
}

fn sample_quiz(rng: &mut ChaCha8Rng) -> Vec<i64> {
    loop {
        let t = rng.random_range(10..=99);
        let (p, d) = distinct_pair(rng, 3, 9);
        let c = rng.random_range(2..=t - 2);
        let s = c * p - (t - c) * d;
        if (2..=999).contains(&s) && s != t && s != p && s != d {
            return vec![t, p, d, s];
        }
    }
}

fn sample_tank(rng: &mut ChaCha8Rng) -> Vec<i64> {
    let (l, w) = distinct_pair(rng, 3, 99);
    loop {
        let h = rng.random_range(3..=40);
        if h != l && h != w {
            return vec![l, w, h];
        }
    }
}

const FAMILIES: &[Family] = &[
    Family {
        name: "combine",
        ops: 1,
        expr: "{0} + {1}",
        paraphrases: [
            "tom has {0} red marbles and {1} blue marbles how many marbles does he have ?",
            "a jar holds {0} red marbles together with {1} blue marbles how many marbles are in the jar ?",
            "tom counts {0} red marbles then {1} blue marbles how many marbles does tom count in all ?",
            "there are {0} red marbles and {1} blue marbles on the table how many marbles are on the table ?",
            "there are {0} red marbles and {1} blue marbles in a jar how many marbles are in the jar ?",
        ],
        sample: sample_combine,
    },
    Family {
        name: "left",
        ops: 1,
        expr: "{0} − {1}",
        paraphrases: [
            "sam had {0} stickers and gave away {1} stickers how many stickers does sam have left ?",
            "sam collected {0} stickers then gave {1} stickers to friends how many stickers remain ?",
            "out of {0} stickers sam handed out {1} stickers how many stickers does sam still have ?",
            "sam owned {0} stickers and lost {1} of the stickers how many stickers are left ?",
            "starting with {0} stickers sam gave out {1} stickers what number of stickers does sam keep ?",
        ],
        sample: sample_left,
    },
    Family {
        name: "pack",
        ops: 1,
        expr: "{0} × {1}",
        paraphrases: [
            "a hall has {0} rows of seats with {1} seats in each row how many seats are in the hall ?",
            "the hall contains {0} rows each row holding {1} seats how many seats does the hall contain ?",
            "seats in the hall stand in {0} rows of {1} seats each how many seats are there ?",
            "there are {0} rows in the hall and every row has {1} seats how many seats is that in all ?",
            "every one of the {0} rows in the hall has {1} seats how many seats does the hall have ?",
        ],
        sample: sample_pack,
    },
    Family {
        name: "share",
        ops: 1,
        expr: "{0} ÷ {1}",
        paraphrases: [
            "{0} cookies are packed equally into {1} bags how many cookies go in each bag ?",
            "a baker splits {0} cookies evenly among {1} bags how many cookies fill each bag ?",
            "dividing {0} cookies into {1} equal bags gives how many cookies per bag ?",
            "{0} cookies are shared out into {1} bags with the same number in each how many cookies are in every bag ?",
            "if {0} cookies are split fairly across {1} bags how many cookies does each bag hold ?",
        ],
        sample: sample_share,
    },
    Family {
        name: "fence",
        ops: 2,
        expr: "( {0} + {1} ) × 2",
        paraphrases: [
            "a rectangular garden is {0} meters long and {1} meters wide what is the perimeter of the garden in meters ?",
            "the garden measures {0} meters by {1} meters how many meters of fence go around the garden ?",
            "a garden {0} meters long and {1} meters wide needs a fence how long is the fence in meters ?",
            "the rectangular garden has length {0} meters and width {1} meters what is its perimeter in meters ?",
            "a fence is to go around a rectangular garden {0} meters long and {1} meters wide how long is the fence in meters ?",
        ],
        sample: sample_fence,
    },
    Family {
        name: "spend",
        ops: 2,
        expr: "{0} − {1} × {2}",
        paraphrases: [
            "lily has {0} yuan and buys pens costing {1} yuan each she takes {2} pens how much money does she have left ?",
            "lily carries {0} yuan pens cost {1} yuan apiece and lily buys {2} pens how many yuan remain ?",
            "with {0} yuan in her purse lily pays {1} yuan for each of {2} pens how much money is left ?",
            "lily started with {0} yuan each pen costs {1} yuan and she bought {2} pens how many yuan does lily keep ?",
            "lily has {0} yuan and pens cost {1} yuan each lily buys {2} pens how much money does lily have left ?",
        ],
        sample: sample_spend,
    },
    Family {
        name: "average",
        ops: 2,
        expr: "( {0} + {1} ) ÷ 2",
        paraphrases: [
            "ken scored {0} points on the first test and {1} points on the second test what is his average score ?",
            "ken got {0} points on one test and {1} points on the next test what was the average number of points per test ?",
            "on two tests ken earned {0} points and then {1} points what is the average score per test ?",
            "the first test gave ken {0} points and the second test gave {1} points what is the average score per test ?",
            "ken earned {0} points on the first test and {1} points on the second test what was his average score per test ?",
        ],
        sample: sample_average,
    },
    Family {
        name: "outing",
        ops: 3,
        expr: "{0} × {1} + {2} × {3}",
        paraphrases: [
            "the class buys {0} pencils for {1} yuan each and {2} rulers for {3} yuan each how much does the class spend ?",
            "a class orders {0} pencils at {1} yuan apiece and {2} rulers at {3} yuan apiece what is the total cost in yuan ?",
            "buying {0} pencils costing {1} yuan each together with {2} rulers costing {3} yuan each costs the class how many yuan ?",
            "the class pays for {0} pencils at {1} yuan per pencil and {2} rulers at {3} yuan per ruler how many yuan does the class pay ?",
            "the class buys {0} pencils at {1} yuan each and {2} rulers at {3} yuan each what is the cost in yuan ?",
        ],
        sample: sample_outing,
    },
    Family {
        name: "quiz",
        ops: 4,
        expr: "{0} − ( {0} × {1} − {3} ) ÷ ( {1} + {2} )",
        paraphrases: [
            "a quiz has {0} questions each correct answer earns {1} points and each wrong answer loses {2} points sam scored {3} points how many questions did sam answer correctly ?",
            "the quiz lists {0} questions a correct answer gains {1} points a wrong answer costs {2} points and sam finished with {3} points how many questions did sam get correct ?",
            "on a quiz of {0} questions sam earns {1} points per correct answer and loses {2} points per wrong answer ending with {3} points how many questions were answered correctly ?",
            "sam took a quiz with {0} questions where a correct answer adds {1} points and a wrong answer removes {2} points sam got {3} points how many of the questions did sam answer correctly ?",
            "the quiz has {0} questions a correct answer gains {1} points and a wrong answer loses {2} points sam got {3} points how many questions did sam get correct ?",
        ],
        sample: sample_quiz,
    },
    Family {
        name: "tank",
        ops: 5,
        expr: "( {0} × {1} + {1} × {2} + {0} × {2} ) × 2 − {0} × {1}",
        paraphrases: [
            "a lidless tank is {0} decimeters long {1} decimeters wide and {2} decimeters high how many square decimeters of sheet metal form its outside ?",
            "a tank without a lid measures {0} decimeters by {1} decimeters by {2} decimeters how many square decimeters of sheet metal cover its outside ?",
            "the lidless tank has length {0} decimeters width {1} decimeters and height {2} decimeters what is the outside area in square decimeters of sheet metal ?",
            "an open tank {0} decimeters long {1} decimeters wide and {2} decimeters high is made of sheet metal how many square decimeters does its outside use ?",
            "an open tank is {0} decimeters long {1} decimeters wide and {2} decimeters high how many square decimeters of sheet metal cover the outside ?",
        ],
        sample: sample_tank,
    },
];

fn fill(template: &str, nums: &[i64]) -> String {
    let mut s = template.to_string();
    for (k, n) in nums.iter().enumerate() {
        s = s.replace(&format!("{{{k}}}"), &n.to_string());
    }
    s
}

/// Whether a template tag names a paraphrase reserved for held-out splits.
pub fn is_held_out(template: &str) -> bool {
    template.ends_with("/p4")
}

/// Generate `n` problems from the families with at most `max_ops`
/// operations. The same `(n, seed, max_ops)` always yields the same
/// dataset; ids run `syn-00000` upward.
pub fn generate(n: usize, seed: u64, max_ops: usize) -> Result<Dataset, CorpusError> {
    let families: Vec<&Family> = FAMILIES.iter().filter(|f| f.ops <= max_ops).collect();
    if families.is_empty() {
        return Err(CorpusError::Synthetic(format!(
            "no template family has at most {max_ops} operations"
        )));
    }
    if n == 0 {
        return Err(CorpusError::Synthetic("requested zero problems".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut problems = Vec::with_capacity(n);
    for i in 0..n {
        let fam = families[rng.random_range(0..families.len())];
        let pidx = rng.random_range(0..fam.paraphrases.len());
        let nums = (fam.sample)(&mut rng);
        let question = tokenize_text(&fill(fam.paraphrases[pidx], &nums));
        let expression = tokenize_text(&fill(fam.expr, &nums));
        let ast = expr::parse(&expression).expect("template expression parses");
        let answer = expr::evaluate(&ast).expect("template expression evaluates");
        problems.push(Problem {
            id: format!("syn-{i:05}"),
            question,
            expression,
            answer,
            template: Some(format!("{}/p{}", fam.name, pidx)),
        });
    }
    Dataset::new(Split::Train, problems)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse, Expr};

    #[test]
    fn generation_is_deterministic() {
        let a = generate(200, 7, 5).unwrap();
        let b = generate(200, 7, 5).unwrap();
        assert_eq!(a.problems(), b.problems());
        let c = generate(200, 8, 5).unwrap();
        assert_ne!(a.problems(), c.problems());
    }

    #[test]
    fn op_budget_is_respected() {
        let ds = generate(300, 11, 2).unwrap();
        for p in ds.problems() {
            let ops = p
                .expression
                .iter()
                .filter(|t| crate::expr::BinOp::from_token(t).is_some())
                .count();
            assert!(
                (1..=2).contains(&ops),
                "{}: {} has {ops} ops",
                p.id,
                p.expression.join(" ")
            );
        }
        assert!(generate(10, 1, 0).is_err());
    }

    fn min_occurrence(e: &Expr, q: &[String]) -> u64 {
        match e {
            Expr::Number { token, .. } => {
                q.iter().position(|t| t == token).map(|i| i as u64).unwrap_or(u64::MAX)
            }
            Expr::Binary { left, right, .. } => {
                min_occurrence(left, q).min(min_occurrence(right, q))
            }
        }
    }

    fn check_commutative_order(e: &Expr, q: &[String]) {
        if let Expr::Binary { op, left, right } = e {
            if op.commutative() {
                let (kl, kr) = (min_occurrence(left, q), min_occurrence(right, q));
                assert!(
                    kr >= kl || kr == u64::MAX,
                    "operands out of question order in {e}"
                );
            }
            check_commutative_order(left, q);
            check_commutative_order(right, q);
        }
    }

    #[test]
    fn operands_follow_question_order() {
        let ds = generate(400, 3, 5).unwrap();
        for p in ds.problems() {
            let ast = parse(&p.expression).unwrap();
            check_commutative_order(&ast, &p.question);
        }
    }

    #[test]
    fn held_out_paraphrases_are_a_minority() {
        let ds = generate(1000, 5, 5).unwrap();
        let held = ds
            .problems()
            .iter()
            .filter(|p| is_held_out(p.template.as_deref().unwrap()))
            .count();
        assert!((100..=350).contains(&held), "held-out count {held}");
    }
}
