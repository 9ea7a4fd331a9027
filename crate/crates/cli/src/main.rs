fn main() {
    std::process::exit(softfall::cli::main_entry());
}
