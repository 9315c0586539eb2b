use clap::Parser;

use adafocal::commands::{main_with, Cli};

fn main() {
    std::process::exit(main_with(&Cli::parse()));
}
