fn main() {
    std::process::exit(scalesim::cli::main_entry());
}
