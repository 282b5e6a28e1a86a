use crate::error::{Error, Result};

/// Number of concrete styles in the default vocabulary: two cities, each by
/// day and at dusk.
pub const DEFAULT_NUM_STYLES: usize = 4;

/// Discrete conditioning token. `id == num_styles` is the null token used for
/// the unconditional branch of classifier-free guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StyleToken {
    id: usize,
}

impl StyleToken {
    pub fn new(id: usize, num_styles: usize) -> Result<Self> {
        if id > num_styles {
            return Err(Error::contract(format!("style id {id} outside [0, {num_styles}]")));
        }
        Ok(StyleToken { id })
    }

    pub fn null(num_styles: usize) -> Self {
        StyleToken { id: num_styles }
    }

    pub fn id(self) -> usize {
        self.id
    }

    pub fn is_null(self, num_styles: usize) -> bool {
        self.id == num_styles
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_is_checked() {
        assert!(StyleToken::new(4, 4).unwrap().is_null(4));
        assert!(!StyleToken::new(3, 4).unwrap().is_null(4));
        assert!(StyleToken::new(5, 4).is_err());
        assert_eq!(StyleToken::null(4).id(), 4);
    }
}
