mod common;

use std::cell::Cell;

use common::{cluster, entropy2, random_labeled, terasplit_oracle, CLIENT};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sector::bench::{
    boundaries_from_sample, bucket_of, entropy, key_of, teragen, terasort, terasplit, verify_sorted, Checksum,
    SplitScanner, TerasortConfig, KEY_LEN, RECORD_LEN,
};
use sector::node::RecordIndex;
use sector::sphere::SegmentLimits;

fn sorted_pairs(mut data: Vec<(u128, usize)>) -> Vec<(u128, usize)> {
    data.sort_by_key(|d| d.0);
    data
}

#[test]
fn entropy_examples() {
    assert_eq!(entropy(&[5, 5]).unwrap(), 1.0);
    assert_eq!(entropy(&[10, 0]).unwrap(), 0.0);
    assert!((entropy(&[2, 6]).unwrap() - 0.811278).abs() < 1e-6);
    // Closed form for (2, 6): -(1/4) log2(1/4) - (3/4) log2(3/4).
    let closed = 0.5 + 0.75 * (4.0f64 / 3.0).log2();
    assert!((entropy(&[2, 6]).unwrap() - closed).abs() < 1e-12);
    assert!(entropy(&[0, 0]).is_err());
}

#[test]
fn perfect_split() {
    let data: Vec<(u128, usize)> = (1..=6).map(|k| (k, (k > 3) as usize)).collect();
    let r = terasplit(data).unwrap();
    let t = r.threshold.unwrap();
    assert!((3..4).contains(&t));
    assert_eq!(r.gain, 1.0);
    assert_eq!((r.left, r.right), ([3, 0], [0, 3]));
}

#[test]
fn single_class_has_no_split() {
    let r = terasplit((0..20).map(|k| (k, 1))).unwrap();
    assert_eq!((r.threshold, r.gain, r.parent_entropy), (None, 0.0, 0.0));
}

#[test]
fn unsorted_input_is_rejected() {
    assert!(terasplit([(5, 0), (3, 1)]).is_err());
}

#[test]
fn matches_brute_force_on_ten_thousand_records() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..5 {
        let data = random_labeled(&mut rng, 10_000);
        let (t, g, h) = terasplit_oracle(&data);
        let r = terasplit(sorted_pairs(data)).unwrap();
        assert_eq!((r.threshold, r.gain, r.parent_entropy), (t, g, h));
        assert!(0.0 <= r.gain && r.gain <= r.parent_entropy);
    }
}

#[test]
fn scanner_reads_each_record_once() {
    let (data, _) = teragen(2000, 3);
    let mut recs: Vec<&[u8]> = data.chunks(RECORD_LEN).collect();
    recs.sort_by(|a, b| key_of(a).cmp(key_of(b)));
    let pulls = Cell::new(0usize);
    let mut s = SplitScanner::new();
    for r in recs.iter().inspect(|_| pulls.set(pulls.get() + 1)) {
        s.push_record(r).unwrap();
    }
    assert_eq!(pulls.get(), 2000);
    assert_eq!(s.records(), 2000);
    s.finish().unwrap();
}

#[test]
fn teragen_format() {
    let (d, i) = teragen(0, 5);
    assert!(d.is_empty() && i.is_empty());
    let (d, i) = teragen(2, 5);
    assert_eq!(d.len(), 200);
    assert_eq!(i, RecordIndex::from_pairs([(0, 100), (100, 100)]));
    assert_eq!(teragen(100, 5), teragen(100, 5));
}

#[test]
fn buckets_match_a_linear_scan() {
    let (data, _) = teragen(3000, 8);
    let sample: Vec<[u8; KEY_LEN]> = data.chunks(RECORD_LEN).take(500).map(|r| key_of(r).try_into().unwrap()).collect();
    for d in [1, 2, 3, 7, 16] {
        let b = boundaries_from_sample(sample.clone(), d);
        assert_eq!(b.len(), d - 1);
        assert!(b.windows(2).all(|w| w[0] <= w[1]));
        for r in data.chunks(RECORD_LEN) {
            let k = key_of(r);
            let scan = b.iter().filter(|x| &x[..] <= k).count();
            assert_eq!(bucket_of(&b, k), scan);
        }
    }
}

/// Run terasort over the given input files on a fresh cluster and return
/// the output records in stream order.
fn sort_files(files: &[Vec<u8>], nodes: usize) -> Vec<Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    let c = cluster(nodes, dir.path());
    let client = c.client(CLIENT);
    let mut names = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let name = format!("ts/in-{i}");
        client.upload_bytes(&name, f, Some(&RecordIndex::fixed(RECORD_LEN as u64, (f.len() / RECORD_LEN) as u64))).unwrap();
        names.push(name);
    }
    let stream = client.resolve_stream(&names).unwrap();
    let cfg = TerasortConfig { limits: SegmentLimits::new(2000, 20_000).unwrap(), ..Default::default() };
    let report = terasort(&client, &stream, &c.addrs(), &cfg).unwrap();
    let (sorted, sum) = verify_sorted(&client, &report.output).unwrap();
    assert!(sorted);
    let want = Checksum::of(files.iter().flat_map(|f| f.chunks(RECORD_LEN)));
    assert_eq!(sum, want);
    let mut out = Vec::new();
    for f in &report.output.files {
        client.for_each_batch(&f.name, |b| out.extend(b.records().map(<[u8]>::to_vec))).unwrap();
    }
    out
}

fn oracle_sort(files: &[Vec<u8>]) -> Vec<Vec<u8>> {
    let mut all: Vec<Vec<u8>> = files.iter().flat_map(|f| f.chunks(RECORD_LEN).map(<[u8]>::to_vec)).collect();
    all.sort();
    all
}

fn keys(recs: &[Vec<u8>]) -> Vec<Vec<u8>> {
    recs.iter().map(|r| key_of(r).to_vec()).collect()
}

#[test]
fn terasort_sorts_random_input() {
    let files: Vec<Vec<u8>> = (0..3).map(|i| teragen(700, 30 + i).0).collect();
    let out = sort_files(&files, 3);
    assert_eq!(keys(&out), keys(&oracle_sort(&files)));
    let mut a = out.clone();
    a.sort();
    assert_eq!(a, oracle_sort(&files));
}

#[test]
fn terasort_keeps_sorted_input() {
    let sorted: Vec<u8> = oracle_sort(&[teragen(500, 40).0]).concat();
    assert_eq!(sort_files(std::slice::from_ref(&sorted), 2).concat(), sorted);
}

#[test]
fn terasort_reverses_three_records() {
    let mut recs = oracle_sort(&[teragen(3, 41).0]);
    let want = recs.clone();
    recs.reverse();
    assert_eq!(sort_files(&[recs.concat()], 2), want);
}

#[test]
fn terasort_with_duplicate_keys_and_an_empty_file() {
    let (mut data, _) = teragen(600, 42);
    for r in data.chunks_mut(RECORD_LEN) {
        // Only 8 distinct keys.
        let k = r[0] % 8;
        r[..KEY_LEN].fill(k);
    }
    let files = vec![data, Vec::new()];
    let out = sort_files(&files, 3);
    assert_eq!(keys(&out), keys(&oracle_sort(&files)));
}

#[test]
fn terasort_of_nothing() {
    assert!(sort_files(&[Vec::new()], 2).is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn terasplit_equals_oracle(seed in any::<u64>(), n in 1usize..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_labeled(&mut rng, n);
        let (t, g, h) = terasplit_oracle(&data);
        let r = terasplit(sorted_pairs(data)).unwrap();
        prop_assert_eq!((r.threshold, r.gain, r.parent_entropy), (t, g, h));
        prop_assert!(0.0 <= r.gain && r.gain <= r.parent_entropy && r.parent_entropy <= 1.0);
    }

    #[test]
    fn entropy_is_symmetric_and_peaks_at_uniform(a in 0u64..10_000, b in 0u64..10_000) {
        prop_assume!(a + b > 0);
        let h = entropy(&[a, b]).unwrap();
        prop_assert_eq!(h, entropy(&[b, a]).unwrap());
        prop_assert_eq!(h, entropy2([a, b]));
        let n = a + b;
        if n % 2 == 0 {
            prop_assert!(h <= entropy(&[n / 2, n / 2]).unwrap());
        }
        prop_assert!((0.0..=1.0).contains(&h));
    }

    #[test]
    fn checksum_is_order_free(seed in any::<u64>(), n in 0u64..200) {
        let (data, _) = teragen(n, seed);
        let mut recs: Vec<&[u8]> = data.chunks(RECORD_LEN).collect();
        let a = Checksum::of(recs.iter().copied());
        recs.reverse();
        prop_assert_eq!(a, Checksum::of(recs.iter().copied()));
    }
}
