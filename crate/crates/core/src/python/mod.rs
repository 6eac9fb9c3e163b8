//! Python source handling shared by the pipeline and the metrics.

pub mod lexer;
pub mod syntax;

use std::collections::HashSet;
use std::sync::OnceLock;

/// Standard-library module names for CPython 3.10 (`sys.stdlib_module_names`).
const STDLIB_MODULES: &str = include_str!("../../assets/stdlib_modules_py310.txt");

fn stdlib_set() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STDLIB_MODULES.lines().map(str::trim).filter(|l| !l.is_empty()).collect())
}

pub fn is_stdlib_module(name: &str) -> bool {
    stdlib_set().contains(name)
}

/// Import names whose distribution name on the package index differs.
const DISTRIBUTION_ALIASES: &[(&str, &str)] = &[
    ("bs4", "beautifulsoup4"),
    ("cv2", "opencv-python-headless"),
    ("dateutil", "python-dateutil"),
    ("jwt", "PyJWT"),
    ("PIL", "Pillow"),
    ("sklearn", "scikit-learn"),
    ("skimage", "scikit-image"),
    ("yaml", "PyYAML"),
];

/// Maps an import name to the distribution that provides it.
pub fn distribution_for_module(module: &str) -> String {
    DISTRIBUTION_ALIASES
        .iter()
        .find(|(m, _)| *m == module)
        .map_or_else(|| module.to_string(), |(_, d)| (*d).to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stdlib_membership() {
        assert!(is_stdlib_module("os"));
        assert!(is_stdlib_module("__future__"));
        assert!(!is_stdlib_module("requests"));
        assert!(!is_stdlib_module("numpy"));
    }

    #[test]
    fn aliases() {
        assert_eq!(distribution_for_module("sklearn"), "scikit-learn");
        assert_eq!(distribution_for_module("numpy"), "numpy");
    }
}
