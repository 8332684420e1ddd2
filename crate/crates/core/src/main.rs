fn main() {
    std::process::exit(tmass::workbench::cli(std::env::args_os()));
}
