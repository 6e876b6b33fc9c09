fn main() {
    std::process::exit(mimic_icl::cli::run());
}
