use fnftg_core::config::{preset, GtConfig, TtConfig};
use fnftg_core::kg::{centre_rng, sample_neighbourhood, Adjacency, KnowledgeGraph, Triple};
use fnftg_core::model::{Centre, Model, ModelSpec};
use fnftg_core::scoring::Side;
use fnftg_core::text::Vocab;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_triples(rng: &mut ChaCha8Rng, n: u32, rels: u32) -> Vec<Triple> {
    let count = rng.gen_range(5..40);
    let mut ts: Vec<Triple> = (0..count)
        .map(|_| Triple::new(rng.gen_range(0..n), rng.gen_range(0..rels), rng.gen_range(0..n)))
        .collect();
    ts.sort_unstable();
    ts.dedup();
    ts
}

#[test]
fn samples_never_contain_the_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..1000 {
        let n = rng.gen_range(3..12);
        let triples = random_triples(&mut rng, n, 3);
        let target = *triples.choose(&mut rng).unwrap();
        let adj = Adjacency::from_triples(n as usize, &triples);
        let cap = rng.gen_range(1..8);
        for centre in [target.head, target.tail] {
            let mut r = centre_rng(trial, 0, centre);
            let s = sample_neighbourhood(&adj, centre, cap, &[target], &mut r).unwrap();
            for nb in &s.neighbours {
                assert_ne!(nb.triple(centre), target, "trial {trial}: target leaked into the sample of {centre}");
            }
        }
    }
}

#[test]
fn encodings_do_not_depend_on_the_target_edge() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let words = ["red", "green", "blue", "small", "large", "old", "new"];
    let n = 8u32;
    let entities: Vec<(String, String)> = (0..n)
        .map(|i| (format!("e{i}"), format!("{} {}", words[i as usize % 7], words[(i as usize * 3 + 1) % 7])))
        .collect();
    let relations = vec![("r0".to_string(), "likes".to_string()), ("r1".to_string(), "owns".to_string())];
    let mut cfg = preset("synthetic-tg-half").unwrap();
    cfg.text_encoder = TtConfig { layers: 1, width: 8, heads: 2, ffn: 8, max_len: 8 };
    cfg.graph_encoder = GtConfig { layers: 1, heads: 2, ffn: 8 };
    let mut texts: Vec<String> = entities.iter().map(|e| e.1.clone()).collect();
    texts.extend(["likes", "owns", "inverse of"].map(String::from));
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    let model = Model::new(ModelSpec::from_config(&cfg, 2), vocab, 5).unwrap();

    let mut trials = 0;
    while trials < 1000 {
        let with = random_triples(&mut rng, n, 2);
        let target = *with.choose(&mut rng).unwrap();
        if target.head == target.tail {
            continue;
        }
        trials += 1;
        let without: Vec<Triple> = with.iter().copied().filter(|t| *t != target).collect();
        let kg_with = KnowledgeGraph::new(entities.clone(), relations.clone(), &with).unwrap();
        let kg_without = KnowledgeGraph::new(entities.clone(), relations.clone(), &without).unwrap();
        for (centre, side) in [(target.head, Side::Tail), (target.tail, Side::Head)] {
            let encode = |kg: &KnowledgeGraph| -> Vec<Vec<f64>> {
                let mut r = centre_rng(trials, 1, centre);
                let sample = sample_neighbourhood(kg.adjacency(), centre, 3, &[target], &mut r).unwrap();
                vec![
                    model.encode_subgraph(kg, Centre::Query(centre, target.rel, side), &sample).unwrap(),
                    model.encode_subgraph(kg, Centre::Candidate(centre), &sample).unwrap(),
                ]
            };
            let (x, y) = (encode(&kg_with), encode(&kg_without));
            for (u, v) in x.iter().zip(&y) {
                assert!(u.iter().zip(v).all(|(p, q)| p.to_bits() == q.to_bits()), "trial {trials}");
            }
        }
    }
}
