//! Landing-pad name mangling for variadic callees.
//!
//! A variadic call site gets a dedicated non-variadic host entry point per
//! combination of variadic argument types; the wrapper name encodes those
//! types so call sites that disagree on argument types land on different
//! pads.

use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum MangleError {
    #[error("unknown type code `{0}`")]
    UnknownTypeCode(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScalarCode {
    /// 32-bit int, `i`
    I32,
    /// 64-bit int, `l`
    I64,
    /// 32-bit float, `f`
    F32,
    /// 64-bit float, `d`
    F64,
    /// char, `c`
    Char,
}

impl ScalarCode {
    fn letter(self) -> char {
        match self {
            ScalarCode::I32 => 'i',
            ScalarCode::I64 => 'l',
            ScalarCode::F32 => 'f',
            ScalarCode::F64 => 'd',
            ScalarCode::Char => 'c',
        }
    }

    fn from_letter(c: char) -> Option<ScalarCode> {
        match c {
            'i' => Some(ScalarCode::I32),
            'l' => Some(ScalarCode::I64),
            'f' => Some(ScalarCode::F32),
            'd' => Some(ScalarCode::F64),
            'c' => Some(ScalarCode::Char),
            _ => None,
        }
    }

    pub fn size(self) -> u64 {
        match self {
            ScalarCode::Char => 1,
            ScalarCode::I32 | ScalarCode::F32 => 4,
            ScalarCode::I64 | ScalarCode::F64 => 8,
        }
    }
}

/// A variadic argument type: scalar code plus a `p` suffix for address-of,
/// so `int*` mangles as `ip` and `float*` as `fp`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TypeCode {
    pub scalar: ScalarCode,
    pub pointer: bool,
}

impl TypeCode {
    pub fn value(scalar: ScalarCode) -> TypeCode {
        TypeCode { scalar, pointer: false }
    }

    pub fn pointer(scalar: ScalarCode) -> TypeCode {
        TypeCode { scalar, pointer: true }
    }

    pub fn parse(s: &str) -> Result<TypeCode, MangleError> {
        let mut chars = s.chars();
        let scalar = chars
            .next()
            .and_then(ScalarCode::from_letter)
            .ok_or_else(|| MangleError::UnknownTypeCode(s.to_string()))?;
        match chars.as_str() {
            "" => Ok(TypeCode { scalar, pointer: false }),
            "p" => Ok(TypeCode { scalar, pointer: true }),
            _ => Err(MangleError::UnknownTypeCode(s.to_string())),
        }
    }

    pub fn code(self) -> String {
        let mut s = String::with_capacity(2);
        s.push(self.scalar.letter());
        if self.pointer {
            s.push('p');
        }
        s
    }
}

impl std::fmt::Display for TypeCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// `__` + base name + `_`-joined variadic type codes.
pub fn mangle(base_name: &str, variadic: &[TypeCode]) -> String {
    let mut out = String::with_capacity(2 + base_name.len() + 3 * variadic.len());
    out.push_str("__");
    out.push_str(base_name);
    for code in variadic {
        out.push('_');
        out.push_str(&code.code());
    }
    out
}

/// Mangles from textual codes, validating each against the code table.
pub fn mangle_codes(base_name: &str, codes: &[&str]) -> Result<String, MangleError> {
    let parsed = codes
        .iter()
        .map(|c| TypeCode::parse(c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mangle(base_name, &parsed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mangles_pointer_suffixes() {
        assert_eq!(
            mangle_codes("fscanf", &["ip", "fp", "ip"]).unwrap(),
            "__fscanf_ip_fp_ip"
        );
    }

    #[test]
    fn empty_variadic_suffix() {
        assert_eq!(mangle("printf", &[]), "__printf");
    }

    #[test]
    fn suffix_is_injective_on_types() {
        let a = mangle_codes("fscanf", &["fp"]).unwrap();
        let b = mangle_codes("fscanf", &["ip"]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn unknown_codes_rejected() {
        assert!(TypeCode::parse("x").is_err());
        assert!(TypeCode::parse("ipp").is_err());
        assert!(TypeCode::parse("").is_err());
        assert!(mangle_codes("f", &["i", "zz"]).is_err());
    }
}
