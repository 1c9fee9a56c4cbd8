use seqedit::align::retrieval_topk;
use seqedit::bundle::ModelBundle;
use seqedit::corpus::read_pairs;
use seqedit::tokenize::Vocabulary;

#[test]
#[ignore]
fn pool32_eval() {
    let bundle = ModelBundle::<f32>::load("/tmp/exp/run7/align.ckpt").unwrap();
    let vocab = Vocabulary::load("/tmp/exp/run7/vocab.txt").unwrap();
    let pairs = read_pairs(std::io::BufReader::new(
        std::fs::File::open("/tmp/exp/pairs.tsv").unwrap(),
    ))
    .unwrap();
    // Same holdout split as the CLI.
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(seqedit::util::derive_seed(42, "holdout"));
    idx.shuffle(&mut rng);
    let eval: Vec<_> = idx
        .iter()
        .take(64)
        .map(|&i| pairs[i].clone())
        .collect();
    let (p, t) = seqedit::align::embed_pairs(&bundle, &vocab, &eval).unwrap();
    let full = retrieval_topk(&p, &t, 1).unwrap();
    let pool_a = retrieval_topk(&p[..32], &t[..32], 1).unwrap();
    let pool_b = retrieval_topk(&p[32..], &t[32..], 1).unwrap();
    println!(
        "full64 = {full:.4}  pool32 = {:.4} ({pool_a:.4}, {pool_b:.4})",
        (pool_a + pool_b) / 2.0
    );
}
