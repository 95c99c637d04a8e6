fn main() {
    std::process::exit(node_moe_cli::run(std::env::args()));
}
