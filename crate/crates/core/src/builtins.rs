//! Names reserved by the engine. Programs may not define clauses for them.

const RESERVED: &[(&str, usize)] = &[
    ("true", 0),
    ("fail", 0),
    ("false", 0),
    ("!", 0),
    (",", 2),
    (";", 2),
    ("->", 2),
    (":-", 1),
    (":-", 2),
    ("\\+", 1),
    ("=", 2),
    ("\\=", 2),
    ("is", 2),
    ("<", 2),
    (">", 2),
    ("=<", 2),
    (">=", 2),
    ("=:=", 2),
    ("=\\=", 2),
    ("findall", 3),
    ("between", 3),
    ("sum_list", 2),
    ("length", 2),
    ("year_of", 2),
    ("date_lt", 2),
    ("date_le", 2),
    ("date_gt", 2),
    ("date_ge", 2),
];

pub fn is_reserved(name: &str, arity: usize) -> bool {
    RESERVED.iter().any(|&(n, a)| n == name && a == arity)
}

/// `YYYY-MM-DD` shape check used by the date builtins.
pub fn is_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 10
        && b[4] == b'-'
        && b[7] == b'-'
        && b.iter()
            .enumerate()
            .all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit())
}
