fn main() {
    for (m, c, i) in [(0u64, "episode", 0u64), (7, "episode", 3), (7, "model-member", 3)] {
        println!("{m} {c} {i} -> {:#018x}", moose::seeding::derive_seed(m, c, i));
    }
}
