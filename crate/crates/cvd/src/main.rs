fn main() {
    std::process::exit(cvd::cli::main_entry());
}
