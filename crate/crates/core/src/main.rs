fn main() {
    std::process::exit(dcmg::cli::main_entry());
}
