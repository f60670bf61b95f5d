fn main() {
    std::process::exit(predbranch::cli::run());
}
