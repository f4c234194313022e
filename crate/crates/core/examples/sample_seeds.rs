fn main() {
    let (graph, _) = diagsim_core::kb::load_knowledge_base(
        std::path::Path::new("fixtures/kb/graph.json"),
        std::path::Path::new("fixtures/kb/encyclopedia.json"),
    ).unwrap();
    for seed in 0..8u64 {
        let node = diagsim_core::kb::sample_disease(&graph, seed).unwrap();
        println!("seed {seed}: {} ({})", node.id, node.name);
    }
}
