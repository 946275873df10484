fn main() {
    std::process::exit(ctpg::harness::cli::main_entry());
}
