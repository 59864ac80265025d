//! Property tests for the expression, corpus, and memory layers.

use mwp::corpus::{self, Dataset, Problem, Split, Vocab};
use mwp::expr::{self, BinOp, Expr};
use mwp::memory::{Embedder, MemoryIndex};
use num::{BigRational, FromPrimitive};
use proptest::prelude::*;

fn number_strategy() -> impl Strategy<Value = Expr> {
    prop_oneof![
        (0u32..1000).prop_map(|n| Expr::Number {
            value: BigRational::from_u32(n).unwrap(),
            token: n.to_string(),
        }),
        (1u32..500, 1u32..100).prop_map(|(a, b)| {
            let token = format!("{a}.{b:02}");
            Expr::Number { value: expr::parse_number_token(&token).unwrap(), token }
        }),
    ]
}

fn op_strategy() -> impl Strategy<Value = BinOp> {
    prop_oneof![
        Just(BinOp::Add),
        Just(BinOp::Sub),
        Just(BinOp::Mul),
        Just(BinOp::Div),
    ]
}

fn ast_strategy() -> impl Strategy<Value = Expr> {
    number_strategy().prop_recursive(5, 24, 2, |inner| {
        (op_strategy(), inner.clone(), inner).prop_map(|(op, left, right)| Expr::Binary {
            op,
            left: Box::new(left),
            right: Box::new(right),
        })
    })
}

/// ASTs whose every subexpression evaluates (no division by zero).
fn evaluable_ast() -> impl Strategy<Value = Expr> {
    ast_strategy().prop_filter("division by zero", |e| expr::evaluate(e).is_ok())
}

/// A plausible question context: some of the expression's numbers plus
/// noise words, shuffled deterministically by the given ordering choice.
fn question_for(e: &Expr, rotate: usize) -> Vec<String> {
    fn numbers(e: &Expr, out: &mut Vec<String>) {
        match e {
            Expr::Number { token, .. } => out.push(token.clone()),
            Expr::Binary { left, right, .. } => {
                numbers(left, out);
                numbers(right, out);
            }
        }
    }
    let mut toks = Vec::new();
    numbers(e, &mut toks);
    toks.dedup();
    if !toks.is_empty() {
        let r = rotate % toks.len();
        toks.rotate_left(r);
    }
    let mut q = vec!["the".to_string(), "total".to_string()];
    for t in toks {
        q.push(t);
        q.push("and".to_string());
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn emit_then_parse_preserves_value_and_reaches_a_fixpoint(ast in evaluable_ast()) {
        // Emission may flatten value-neutral grouping (`a+(b+c)` prints as
        // `a + b + c`), so the roundtrip contract is: the value never moves,
        // and one parse lands on a form that re-emits verbatim.
        let want = expr::evaluate(&ast).unwrap();
        let tokens = expr::to_tokens(&ast);
        let reparsed = expr::parse(&tokens).expect("emitted tokens parse");
        prop_assert_eq!(&expr::evaluate(&reparsed).unwrap(), &want);
        let again = expr::to_tokens(&reparsed);
        prop_assert_eq!(&again, &tokens, "emission not stable");
        prop_assert_eq!(&expr::parse(&again).unwrap(), &reparsed);
    }

    #[test]
    fn normalisation_preserves_value_and_is_idempotent(
        ast in evaluable_ast(),
        rotate in 0usize..8,
    ) {
        let question = question_for(&ast, rotate);
        let want = expr::evaluate(&ast).unwrap();
        let once = expr::normalize(&ast, &question);
        let got = expr::evaluate(&expr::parse(&once).unwrap()).unwrap();
        prop_assert_eq!(&got, &want);
        let twice = expr::normalize_tokens(&once, &question).unwrap();
        prop_assert_eq!(&once, &twice, "second pass changed the form");
    }

    #[test]
    fn emitted_brackets_are_structurally_necessary(ast in evaluable_ast()) {
        let tokens = expr::to_tokens(&ast);
        let canonical = expr::parse(&tokens).unwrap();
        // Locate each matched bracket pair.
        let mut stack = Vec::new();
        let mut pairs = Vec::new();
        for (i, t) in tokens.iter().enumerate() {
            match t.as_str() {
                "(" => stack.push(i),
                ")" => pairs.push((stack.pop().expect("balanced"), i)),
                _ => {}
            }
        }
        prop_assert!(stack.is_empty());
        for (open, close) in pairs {
            let mut removed = Vec::with_capacity(tokens.len() - 2);
            for (i, t) in tokens.iter().enumerate() {
                if i != open && i != close {
                    removed.push(t.clone());
                }
            }
            match expr::parse(&removed) {
                Err(_) => {}
                Ok(tree) => prop_assert_ne!(
                    &tree, &canonical,
                    "brackets at {}..{} were redundant in {:?}",
                    open, close, tokens
                ),
            }
        }
    }

    #[test]
    fn tokenisation_is_a_fixpoint(fragments in prop::collection::vec(
        prop_oneof![
            Just("Maya".to_string()),
            Just("buys".to_string()),
            Just("3.5%".to_string()),
            Just("12".to_string()),
            Just("apples,".to_string()),
            Just("for$4".to_string()),
            Just("7x9".to_string()),
            Just("half-price".to_string()),
        ],
        1..12,
    )) {
        let text = fragments.join(" ");
        let once = corpus::tokenize_text(&text);
        let again = corpus::tokenize_text(&once.join(" "));
        prop_assert_eq!(once, again);
    }
}

fn small_problem_strategy() -> impl Strategy<Value = (String, Expr)> {
    (any::<u32>(), evaluable_ast()).prop_map(|(n, ast)| (format!("p-{n:08x}"), ast))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn corpus_jsonl_roundtrip_is_lossless(
        seeds in prop::collection::vec(small_problem_strategy(), 1..8),
    ) {
        let mut problems = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, (id, ast)) in seeds.into_iter().enumerate() {
            if !seen.insert(id.clone()) {
                continue;
            }
            let question = question_for(&ast, i);
            let answer = expr::evaluate(&ast).unwrap();
            problems.push(Problem {
                id,
                question,
                expression: expr::to_tokens(&ast),
                answer,
                template: if i % 2 == 0 { Some(format!("fam/p{i}")) } else { None },
            });
        }
        prop_assume!(!problems.is_empty());
        let ds = Dataset::new(Split::Train, problems).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        corpus::save_jsonl(&ds, &path).unwrap();
        let loaded = corpus::load_jsonl(&path, Split::Train).unwrap();
        prop_assert_eq!(loaded.len(), ds.len());
        for (a, b) in ds.problems().iter().zip(loaded.problems()) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(&a.question, &b.question);
            prop_assert_eq!(&a.expression, &b.expression);
            prop_assert_eq!(&a.answer, &b.answer);
            prop_assert_eq!(&a.template, &b.template);
        }
    }

    #[test]
    fn vocabulary_generation_set_is_sorted_and_closed(seed in 0u64..500) {
        let ds = corpus::synthetic::generate(12, seed, 3).unwrap();
        let vocab = Vocab::build(&ds, 1);
        let gen = vocab.gen_ids();
        prop_assert!(gen.windows(2).all(|w| w[0] < w[1]), "sorted, unique");
        for p in ds.problems() {
            for tok in &p.expression {
                let id = vocab.lookup(tok).expect("training token present");
                prop_assert!(vocab.is_gen(id), "expression token `{}` generable", tok);
            }
        }
        prop_assert!(vocab.is_gen(corpus::EOS));
    }

    #[test]
    fn index_search_finds_each_stored_row_first(seed in 0u64..200) {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dim = 6;
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for i in 0..40 {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(norm > 1e-9);
            for x in &mut v {
                *x /= norm;
            }
            ids.push(format!("row-{i:03}"));
            rows.push(v);
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let index = MemoryIndex::from_rows(dim, ids.clone(), flat);
        for (i, row) in rows.iter().enumerate() {
            let out = index.search(row, 1, None).unwrap();
            prop_assert_eq!(out.results[0].id.as_str(), ids[i].as_str());
        }
    }

    #[test]
    fn embedder_roundtrips_through_disk(seed in 0u64..200) {
        let ds = corpus::synthetic::generate(10, seed, 2).unwrap();
        let embedder = mwp::memory::fit_embedder(&ds, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        embedder.save(&path).unwrap();
        let loaded = Embedder::load(&path).unwrap();
        let q = &ds.problems()[0].question;
        let a = embedder.embed_question(q);
        let b = loaded.embed_question(q);
        prop_assert_eq!(a.vector, b.vector);
        prop_assert_eq!(a.fallback, b.fallback);
    }
}
