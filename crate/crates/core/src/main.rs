fn main() {
    std::process::exit(motiondiff::cli::run(std::env::args_os()));
}
