//! Reference architecture specs bundled with the crate (ImageNet-1K heads).

use super::ArchitectureSpec;
use crate::error::Result;

pub const RESNET18: &str = include_str!("../../specs/resnet18.json");
pub const RESNET50: &str = include_str!("../../specs/resnet50.json");
pub const MOBILENET_V2: &str = include_str!("../../specs/mobilenet_v2.json");
pub const SHUFFLENET_V2_X0_5: &str = include_str!("../../specs/shufflenet_v2_x0.5.json");

pub const NAMES: [&str; 4] = ["resnet18", "resnet50", "mobilenet_v2", "shufflenet_v2_x0.5"];

pub fn by_name(name: &str) -> Option<Result<ArchitectureSpec>> {
    let text = match name {
        "resnet18" => RESNET18,
        "resnet50" => RESNET50,
        "mobilenet_v2" => MOBILENET_V2,
        "shufflenet_v2_x0.5" => SHUFFLENET_V2_X0_5,
        _ => return None,
    };
    Some(ArchitectureSpec::from_json(text, name))
}

pub fn resnet18() -> ArchitectureSpec {
    by_name("resnet18").unwrap().expect("bundled spec is valid")
}

pub fn resnet50() -> ArchitectureSpec {
    by_name("resnet50").unwrap().expect("bundled spec is valid")
}

pub fn mobilenet_v2() -> ArchitectureSpec {
    by_name("mobilenet_v2").unwrap().expect("bundled spec is valid")
}

pub fn shufflenet_v2_x0_5() -> ArchitectureSpec {
    by_name("shufflenet_v2_x0.5").unwrap().expect("bundled spec is valid")
}
