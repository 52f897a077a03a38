//! Holds the `acceptance` test target. It lives in its own package so it
//! runs after the unit and contract suites of the other crates.
