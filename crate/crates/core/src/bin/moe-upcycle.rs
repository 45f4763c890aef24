fn main() {
    std::process::exit(expert_upcycling::cli::run(std::env::args_os()));
}
