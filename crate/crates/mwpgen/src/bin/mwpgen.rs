fn main() {
    std::process::exit(mwpgen::cli::main_entry(std::env::args_os()));
}
