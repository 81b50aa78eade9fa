// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};

pub const FT_PER_M: f64 = 3.28084;
pub const CFS_PER_CMS: f64 = 35.3147;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conversion {
    StageMToFt,
    DischargeM3sToFt3s,
}

impl Conversion {
    pub fn factor(self) -> f64 {
        match self {
            Conversion::StageMToFt => FT_PER_M,
            Conversion::DischargeM3sToFt3s => CFS_PER_CMS,
        }
    }
}

pub fn convert_units(value: f64, kind: Conversion) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "unit conversion",
            value,
        });
    }
    Ok(value * kind.factor())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants() {
        assert_eq!(convert_units(1.0, Conversion::StageMToFt).unwrap(), 3.28084);
        assert_eq!(convert_units(0.0, Conversion::StageMToFt).unwrap(), 0.0);
        assert_eq!(
            convert_units(2.0, Conversion::DischargeM3sToFt3s).unwrap(),
            2.0 * 35.3147
        );
        assert!((convert_units(2.0, Conversion::DischargeM3sToFt3s).unwrap() - 70.6294).abs() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(convert_units(f64::NAN, Conversion::StageMToFt).is_err());
        assert!(convert_units(f64::INFINITY, Conversion::DischargeM3sToFt3s).is_err());
    }
}
