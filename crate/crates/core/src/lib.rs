pub mod layout;
pub mod mask;
pub mod tokens;
pub mod parser;
pub mod prompt;
pub mod provider;
pub mod attention;
pub mod eval;
pub mod sample;
