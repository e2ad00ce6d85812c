fn main() {
    std::process::exit(taskmesh::cli::main_entry());
}
