fn main() {
    let t0 = std::time::Instant::now();
    let cfg = ctxasr_core::corpus::CorpusConfig::default();
    let c = ctxasr_core::corpus::generate_corpus(&cfg, 1).unwrap();
    println!("gen 3000+96 in {:?}, train[0] frames {}", t0.elapsed(), c.train[0].feats.len());
}
