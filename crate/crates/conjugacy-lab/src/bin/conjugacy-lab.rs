fn main() {
    std::process::exit(conjugacy_lab::cli::run());
}
