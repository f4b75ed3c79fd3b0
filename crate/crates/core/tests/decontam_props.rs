mod common;

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tikzkit_core::decontam::build_splits;

#[test]
fn splits_are_clean_unique_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut tested, mut flagged) = (0, 0);
    for round in 0..20 {
        let records = common::random_records(&mut rng, 60);
        let mut p = common::policy();
        if round % 2 == 1 {
            p.test_size = Some(5);
            p.seed = round;
        }
        let a = build_splits(records.clone(), &p).unwrap();
        assert_eq!(common::shared_ngrams(&a, p.ngram_n), 0, "round {round}");
        tested += a.test.len();
        flagged += a.report.flagged_pairs.len();
        let origins: HashSet<&str> = a.test.iter().map(|r| r.origin_key.as_str()).collect();
        assert_eq!(origins.len(), a.test.len());
        assert!(a.train.iter().all(|r| !origins.contains(r.origin_key.as_str())));
        assert_eq!(a.test.len() + a.train.len() + a.quarantine.len(), records.len());
        let b = build_splits(records, &p).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
    assert!(tested > 0 && flagged > 0, "tested {tested} flagged {flagged}");
}
