//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if
//! any criterion fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use villa_core::corpus::chunk_text;
use villa_core::datastore::build_datastores;
use villa_core::embedding::EmbeddingVector;
use villa_core::evaluation::{
    aggregate, mann_whitney_u, score_manifest, set_metrics, sweep, PValueMethod, Scope, StdKind, SweepSetup,
};
use villa_core::mutation::{parse_mutation, AMINO_ACIDS};
use villa_core::pipeline::{run_experiment, Method, OracleResponder, Pipeline, RetrievalConfig, Templates};
use villa_core::synthetic::{fixture, MutationPlacement, SyntheticFixture};
use villa_core::vectorstore::{DatastoreEntry, Query, VectorStore};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| (f64::from(*x) / n) as f32).collect();
        }
    }
}

/// Cosine distance recomputed from scratch, independent of the store.
fn oracle_distance(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

fn random_store(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (VectorStore, Vec<(String, Vec<f32>)>) {
    let mut store = VectorStore::new(dim);
    let mut raw: Vec<(String, Vec<f32>)> = Vec::with_capacity(n);
    for i in 0..n {
        // Every tenth vector duplicates an earlier one to force exact ties.
        let v = if i % 10 == 9 {
            raw[rng.random_range(0..i)].1.clone()
        } else {
            random_unit(rng, dim)
        };
        let pub_id = format!("P{:04}", rng.random_range(0..n));
        let entry = DatastoreEntry::chunk_entry(&pub_id, i as u32, EmbeddingVector::new(v.clone()).unwrap(), "");
        raw.push((entry.entry_id.clone(), v));
        store.insert(entry).unwrap();
    }
    (store, raw)
}

fn retrieval_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (store, raw) = random_store(&mut rng, 1000, 64);
    let mut elapsed = Duration::ZERO;
    let mut ties_seen = 0;
    for q in 0..50 {
        // A few queries sit exactly on a stored vector, so duplicates tie at 0.
        let qv = if q % 5 == 0 {
            raw[rng.random_range(0..raw.len())].1.clone()
        } else {
            random_unit(&mut rng, 64)
        };
        let query = EmbeddingVector::new(qv.clone()).unwrap();
        let t0 = Instant::now();
        let got = store
            .top_k(Query {
                vector: &query,
                k: 10,
                threshold: 2.0,
                pub_id: None,
            })
            .map_err(|e| e.to_string())?;
        elapsed += t0.elapsed();

        let mut expected: Vec<(f64, &str)> = raw.iter().map(|(id, v)| (oracle_distance(&qv, v), id.as_str())).collect();
        expected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        expected.truncate(10);
        ties_seen += expected.windows(2).filter(|w| w[0].0 == w[1].0).count();

        let got_ids: Vec<&str> = got.iter().map(|s| s.entry.entry_id.as_str()).collect();
        let exp_ids: Vec<&str> = expected.iter().map(|e| e.1).collect();
        ensure!(got_ids == exp_ids, "query {q}: {got_ids:?} != {exp_ids:?}");
        for (g, e) in got.iter().zip(&expected) {
            ensure!((g.distance - e.0).abs() < 1e-12, "query {q}: distance {} vs {}", g.distance, e.0);
        }
    }
    ensure!(ties_seen > 0, "fixture produced no ties");
    ensure!(elapsed < Duration::from_secs(5), "50 queries took {elapsed:?}");
    Ok(format!("50 queries over 1000 vectors, {ties_seen} tied pairs, {elapsed:?}"))
}

/// Window starts by the stride rule: advance by size - overlap, stop once a
/// window reaches the end.
fn stride_offsets(len: usize, size: usize, overlap: usize) -> Vec<usize> {
    let mut out = Vec::new();
    if len == 0 {
        return out;
    }
    let mut s = 0;
    loop {
        out.push(s);
        if s + size >= len {
            return out;
        }
        s += size - overlap;
    }
}

fn check_chunks(text: &str, size: usize, overlap: usize) -> Result<(), String> {
    let chars: Vec<char> = text.chars().collect();
    let w = chunk_text(text, size, overlap).map_err(|e| e.to_string())?;
    let starts: Vec<usize> = w.iter().map(|c| c.start).collect();
    ensure!(
        starts == stride_offsets(chars.len(), size, overlap),
        "offsets {starts:?} for len {} size {size} overlap {overlap}",
        chars.len()
    );
    let mut covered = vec![false; chars.len()];
    for c in &w {
        let piece: Vec<char> = c.text.chars().collect();
        ensure!(piece.len() <= size, "window longer than size");
        ensure!(piece[..] == chars[c.start..c.start + piece.len()], "window text differs from source");
        covered[c.start..c.start + piece.len()].iter_mut().for_each(|x| *x = true);
    }
    ensure!(covered.iter().all(|x| *x), "coverage gap");
    for pair in w.windows(2) {
        let a: Vec<char> = pair[0].text.chars().collect();
        let b: Vec<char> = pair[1].text.chars().collect();
        ensure!(a[a.len() - overlap..] == b[..overlap], "overlap mismatch at {}", pair[1].start);
    }
    let mut rebuilt: String = w.first().map(|c| c.text.clone()).unwrap_or_default();
    for c in w.iter().skip(1) {
        rebuilt.extend(c.text.chars().skip(overlap));
    }
    ensure!(rebuilt == text, "reconstruction differs");
    Ok(())
}

fn chunker_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let alphabet: Vec<char> = "abc xyzé漢🦠\n".chars().collect();
    for i in 0..200 {
        let len = rng.random_range(0..3000);
        let size = rng.random_range(1..1200);
        let overlap = rng.random_range(0..size);
        let text: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        check_chunks(&text, size, overlap).map_err(|e| format!("triple {i}: {e}"))?;
    }
    let worked = "x".repeat(2500);
    let starts: Vec<usize> = chunk_text(&worked, 1000, 100).unwrap().iter().map(|c| c.start).collect();
    ensure!(starts == [0, 900, 1800], "worked example offsets {starts:?}");
    ensure!(stride_offsets(2500, 1000, 100) == starts, "stride oracle disagrees");
    Ok("200 random triples + worked example 0/900/1800".into())
}

fn mutation_grammar() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let residues: Vec<char> = AMINO_ACIDS.chars().collect();
    for _ in 0..10_000 {
        let o = residues[rng.random_range(0..residues.len())];
        let c = residues[rng.random_range(0..residues.len())];
        let pos: u32 = rng.random_range(1..100_000);
        let zeros = "0".repeat(rng.random_range(0..3));
        let pad = |rng: &mut ChaCha8Rng| " \t".chars().take(rng.random_range(0..3)).collect::<String>();
        let case = |ch: char, lower: bool| if lower { ch.to_ascii_lowercase() } else { ch };
        let s = format!(
            "{}{}{zeros}{pos}{}{}",
            pad(&mut rng),
            case(o, rng.random()),
            case(c, rng.random()),
            pad(&mut rng)
        );
        let m = parse_mutation(&s).map_err(|e| format!("{s:?} rejected: {e}"))?;
        ensure!(
            (m.original(), m.position(), m.changed()) == (o, pos, c),
            "{s:?} parsed as {m}"
        );
        let canon = m.normalize();
        ensure!(canon == format!("{o}{pos}{c}"), "{s:?} normalized to {canon}");
        let again = parse_mutation(&canon).map_err(|e| e.to_string())?;
        ensure!(again == m && again.normalize() == canon, "{s:?} round-trip failed");
    }
    let invalid = [
        "", "627K", "A123", "AC", "A 123C", "A123 C", "AA123C", "A123CC", "B123C", "A0C", "Δ123", "123del", "K123del",
    ];
    for s in invalid {
        ensure!(parse_mutation(s).is_err(), "{s:?} accepted");
    }
    let m = parse_mutation("A123C").map_err(|e| e.to_string())?;
    ensure!((m.original(), m.position(), m.changed()) == ('A', 123, 'C'), "A123C parsed as {m}");
    Ok(format!("10000 valid strings, {} invalid forms, A123C", invalid.len()))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

fn metric_identities() -> Outcome {
    let s = |items: &[&str]| items.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
    let m = set_metrics(&s(&["b", "c", "d"]), &s(&["a", "b", "c"]));
    ensure!(close(m.precision, 2.0 / 3.0) && close(m.recall, 2.0 / 3.0) && close(m.f1, 2.0 / 3.0), "{m:?}");
    let m = set_metrics(&s(&[]), &s(&["a"]));
    ensure!((m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0), "{m:?}");
    let m = set_metrics(&s(&["a", "b"]), &s(&["a", "b"]));
    ensure!((m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0), "{m:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for i in 0..1000 {
        let universe = rng.random_range(1..40u32);
        let pick = |rng: &mut ChaCha8Rng, p: f64| (0..universe).filter(|_| rng.random_bool(p)).collect::<BTreeSet<_>>();
        let retrieved = pick(&mut rng, 0.4);
        let overall = pick(&mut rng, 0.5);
        let ctx: BTreeSet<u32> = overall.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        let p_ctx = set_metrics(&retrieved, &ctx).precision;
        let p_all = set_metrics(&retrieved, &overall).precision;
        // The vacuous (empty, empty) case scores 1 by convention; the
        // theorem is about runs that retrieved something.
        if retrieved.is_empty() {
            continue;
        }
        ensure!(p_ctx <= p_all, "triple {i}: {p_ctx} > {p_all}");
    }
    Ok("hand fixtures exact; 1000 randomized triples".into())
}

fn oracle_scores(f: &SyntheticFixture, config: RetrievalConfig, methods: &[Method]) -> Result<Vec<(Method, f64, f64, f64)>, String> {
    let embedder = f.embedder.build(None, 1).map_err(|e| e.to_string())?;
    let stores = build_datastores(&f.corpus, embedder.as_ref(), f.chunking).map_err(|e| e.to_string())?;
    let oracle = OracleResponder::new(&f.ground_truth);
    let pipeline = Pipeline {
        embedder: embedder.as_ref(),
        responder: &oracle,
        abstracts: Some(&stores.abstracts),
        fulltext: Some(&stores.fulltext),
        config,
        templates: Templates::default(),
    };
    let mut out = Vec::new();
    for &m in methods {
        let run = run_experiment(&pipeline, m, &f.virus, &f.proteins, 1, &String::new).map_err(|e| e.to_string())?;
        let cells = score_manifest(&run, &f.ground_truth).map_err(|e| e.to_string())?;
        for c in cells.iter().filter(|c| m == Method::Villa && c.scope == Scope::Overall) {
            let x = c.metrics;
            ensure!(
                (x.precision, x.recall, x.f1) == (1.0, 1.0, 1.0),
                "VILLA on {}: P={} R={} F1={}",
                c.protein,
                x.precision,
                x.recall,
                x.f1
            );
        }
        let s = aggregate(&cells, StdKind::Population).map_err(|e| e.to_string())?;
        let g = s.group(m, Scope::Overall).ok_or("missing overall group")?;
        out.push((m, g.precision.mean, g.recall.mean, g.f1.mean));
    }
    Ok(out)
}

fn end_to_end_oracle() -> Outcome {
    let f = fixture(MutationPlacement::Spread);
    ensure!(f.retrieval.k_a >= 6, "fixture k_a {}", f.retrieval.k_a);
    let scores = oracle_scores(&f, f.retrieval, &[Method::Villa, Method::RagFulltext, Method::RagAbstracts])?;
    let [(_, _, _, villa), (_, _, _, fulltext), (_, _, abs_recall, abstracts)] = scores[..] else {
        return Err("unexpected score count".into());
    };
    ensure!(abs_recall < 1.0, "RAG-abstracts recall {abs_recall}");
    ensure!(villa > fulltext && fulltext > abstracts, "F1 ordering {villa} / {fulltext} / {abstracts}");
    Ok(format!("F1 villa {villa:.3} > fulltext {fulltext:.3} > abstracts {abstracts:.3}"))
}

fn sweep_monotonicity() -> Outcome {
    let mut lines = Vec::new();
    for (placement, k_c_values) in [(MutationPlacement::Spread, vec![3]), (MutationPlacement::FirstChunk, vec![1, 2, 4])] {
        let f = fixture(placement);
        let embedder = f.embedder.build(None, 1).map_err(|e| e.to_string())?;
        let stores = build_datastores(&f.corpus, embedder.as_ref(), f.chunking).map_err(|e| e.to_string())?;
        let oracle = OracleResponder::new(&f.ground_truth);
        let setup = SweepSetup {
            embedder: embedder.as_ref(),
            responder: &oracle,
            abstracts: &stores.abstracts,
            fulltext: &stores.fulltext,
            templates: Templates::default(),
            base: f.retrieval,
            virus: f.virus.clone(),
            proteins: f.proteins.clone(),
            iterations: 1,
            ground_truth: &f.ground_truth,
            std_kind: StdKind::Population,
        };
        let rows = sweep(&setup, &[1, 2, 4, 6], &k_c_values).map_err(|e| e.to_string())?;
        let overall = |k_a: usize, k_c: usize| -> Result<(f64, f64), String> {
            let row = rows.iter().find(|r| r.k_a == k_a && r.k_c == k_c).ok_or("missing row")?;
            let s = row.summary.as_ref().ok_or_else(|| row.error.clone().unwrap_or_default())?;
            let g = s.group(Method::Villa, Scope::Overall).ok_or("missing group")?;
            Ok((g.recall.mean, g.f1.mean))
        };
        for &k_c in &k_c_values {
            let recalls = [1, 2, 4, 6].map(|k_a| overall(k_a, k_c).map(|x| x.0)).into_iter().collect::<Result<Vec<_>, _>>()?;
            ensure!(recalls.windows(2).all(|w| w[0] <= w[1]), "{placement:?} k_c={k_c}: recall {recalls:?}");
            lines.push(format!("recall {recalls:.3?}"));
        }
        if placement == MutationPlacement::FirstChunk {
            for k_a in [1, 2, 4, 6] {
                let f1s = k_c_values.iter().map(|&k_c| overall(k_a, k_c).map(|x| x.1)).collect::<Result<Vec<_>, _>>()?;
                ensure!(f1s.iter().all(|x| *x == f1s[0]), "k_a={k_a}: F1 over k_c {f1s:?}");
            }
            lines.push("F1 flat in k_c".into());
        }
    }
    Ok(lines.join("; "))
}

/// Brute-force Mann-Whitney: U counts pairs (ties count 1/2); the exact
/// p-value enumerates every way to assign the pooled values to sample A.
fn brute_force_mwu(a: &[f64], b: &[f64]) -> (f64, f64) {
    let u = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .flat_map(|x| b.iter().map(move |y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 }))
            .sum()
    };
    let observed = u(a, b);
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let (mut total, mut le, mut ge) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let (sa, sb): (Vec<f64>, Vec<f64>) = {
            let mut sa = Vec::new();
            let mut sb = Vec::new();
            for (i, v) in pooled.iter().enumerate() {
                if mask & (1 << i) != 0 { sa.push(*v) } else { sb.push(*v) }
            }
            (sa, sb)
        };
        let x = u(&sa, &sb);
        total += 1;
        le += u64::from(x <= observed);
        ge += u64::from(x >= observed);
    }
    (observed, (2.0 * le.min(ge) as f64 / total as f64).min(1.0))
}

fn mann_whitney() -> Outcome {
    let cases: [(&[f64], &[f64]); 3] = [
        (&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]),
        (&[1.0, 3.0], &[2.0, 4.0]),
        (
            &[0.62, 0.71, 0.55, 0.80, 0.67, 0.59, 0.74],
            &[0.81, 0.77, 0.69, 0.90, 0.85, 0.73, 0.88, 0.79],
        ),
    ];
    let mut lines = Vec::new();
    for (a, b) in cases {
        let r = mann_whitney_u(a, b).map_err(|e| e.to_string())?;
        let (u, p) = brute_force_mwu(a, b);
        ensure!(r.method == PValueMethod::Exact, "{a:?} vs {b:?} not on the exact path");
        ensure!(r.u_a == u, "U {} vs brute force {u}", r.u_a);
        ensure!((r.p_two_sided - p).abs() < 1e-9, "p {} vs brute force {p}", r.p_two_sided);
        lines.push(format!("U={u} p={p:.6}"));
    }
    Ok(lines.join(", "))
}

fn store_persistence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (store, _) = random_store(&mut rng, 300, 32);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("store.bin");
    store.persist(&path).map_err(|e| e.to_string())?;
    let reopened = VectorStore::open(&path).map_err(|e| e.to_string())?;
    for q in 0..10 {
        let v = EmbeddingVector::new(random_unit(&mut rng, 32)).unwrap();
        let query = Query {
            vector: &v,
            k: 1 + q * 3,
            threshold: 2.0,
            pub_id: None,
        };
        let before = store.top_k(query).map_err(|e| e.to_string())?;
        let after = reopened.top_k(query).map_err(|e| e.to_string())?;
        ensure!(before == after, "query {q} differs after reopen");
    }
    let first = std::fs::read(&path).map_err(|e| e.to_string())?;
    let path2 = dir.path().join("store2.bin");
    reopened.persist(&path2).map_err(|e| e.to_string())?;
    let second = std::fs::read(&path2).map_err(|e| e.to_string())?;
    let path3 = dir.path().join("store3.bin");
    VectorStore::open(&path2).map_err(|e| e.to_string())?.persist(&path3).map_err(|e| e.to_string())?;
    let third = std::fs::read(&path3).map_err(|e| e.to_string())?;
    ensure!(first == second && second == third, "bytes changed across save/load cycles");
    Ok(format!("10 queries identical, {} bytes stable over two cycles", first.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("retrieval exactness", retrieval_exactness),
        ("chunker properties", chunker_properties),
        ("mutation grammar", mutation_grammar),
        ("metric identities", metric_identities),
        ("end-to-end oracle run", end_to_end_oracle),
        ("sweep monotonicity", sweep_monotonicity),
        ("mann-whitney u", mann_whitney),
        ("store persistence", store_persistence),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
