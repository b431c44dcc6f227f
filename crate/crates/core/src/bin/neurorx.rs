fn main() {
    std::process::exit(neurorx::harness::cli_main(std::env::args_os()));
}
