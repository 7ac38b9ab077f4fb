fn main() {
    std::process::exit(nmt_mcts_cli::main_with_args(std::env::args().collect()));
}
