use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::OnceLock;

pub const NUM_SUPER_CATEGORIES: usize = 5;

/// Object class with its typical size and geometry group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Category {
    pub name: String,
    /// `[length, width, height]` in meters.
    pub prior_size: [f64; 3],
    pub super_category: usize,
    pub is_base: bool,
}

// (name, prior l/w/h, super category, base)
const TABLE: [(&str, [f64; 3], usize, bool); 10] = [
    ("car", [4.63, 1.97, 1.74], 0, true),
    ("truck", [6.93, 2.51, 2.84], 0, false),
    ("construction_vehicle", [6.37, 2.85, 3.19], 0, true),
    ("bus", [10.50, 2.94, 3.47], 1, false),
    ("trailer", [12.29, 2.90, 3.87], 1, true),
    ("barrier", [0.50, 2.53, 0.98], 2, true),
    ("motorcycle", [2.11, 0.77, 1.47], 3, false),
    ("bicycle", [1.70, 0.60, 1.28], 3, true),
    ("pedestrian", [0.73, 0.67, 1.77], 4, true),
    ("traffic_cone", [0.41, 0.41, 1.07], 4, false),
];

/// The fixed category table, in canonical order.
pub fn categories() -> &'static [Category] {
    static CATS: OnceLock<Vec<Category>> = OnceLock::new();
    CATS.get_or_init(|| {
        TABLE
            .iter()
            .map(|(name, prior, sup, base)| Category {
                name: name.to_string(),
                prior_size: *prior,
                super_category: *sup,
                is_base: *base,
            })
            .collect()
    })
}

impl Category {
    /// Looks up a category by name; spaces and hyphens are accepted in place
    /// of underscores.
    pub fn by_name(name: &str) -> Option<Category> {
        let key = name.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        categories().iter().find(|c| c.name == key).cloned()
    }

    pub fn base() -> impl Iterator<Item = &'static Category> {
        categories().iter().filter(|c| c.is_base)
    }

    pub fn novel() -> impl Iterator<Item = &'static Category> {
        categories().iter().filter(|c| !c.is_base)
    }

    /// Index into [`categories`].
    pub fn index(&self) -> usize {
        categories()
            .iter()
            .position(|c| c.name == self.name)
            .expect("category from table")
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl TryFrom<String> for Category {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Category::by_name(&s).ok_or_else(|| format!("unknown category `{s}`"))
    }
}

impl From<Category> for String {
    fn from(c: Category) -> String {
        c.name
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_groups() {
        let sup = |n: &str| Category::by_name(n).unwrap().super_category;
        assert_eq!(sup("car"), 0);
        assert_eq!(sup("truck"), 0);
        assert_eq!(sup("construction vehicle"), 0);
        assert_eq!(sup("bus"), 1);
        assert_eq!(sup("trailer"), 1);
        assert_eq!(sup("barrier"), 2);
        assert_eq!(sup("motorcycle"), 3);
        assert_eq!(sup("bicycle"), 3);
        assert_eq!(sup("pedestrian"), 4);
        assert_eq!(sup("traffic cone"), 4);
    }

    #[test]
    fn base_novel_split() {
        let base: Vec<_> = Category::base().map(|c| c.name.as_str()).collect();
        assert_eq!(
            base,
            [
                "car",
                "construction_vehicle",
                "trailer",
                "barrier",
                "bicycle",
                "pedestrian"
            ]
        );
        let novel: Vec<_> = Category::novel().map(|c| c.name.as_str()).collect();
        assert_eq!(novel, ["truck", "bus", "motorcycle", "traffic_cone"]);
    }

    #[test]
    fn priors_positive() {
        for c in categories() {
            assert!(c.prior_size.iter().all(|&s| s > 0.0));
        }
        assert_eq!(
            Category::by_name("bus").unwrap().prior_size,
            [10.5, 2.94, 3.47]
        );
    }

    #[test]
    fn serde_as_name() {
        let c = Category::by_name("truck").unwrap();
        assert_eq!(serde_json::to_string(&c).unwrap(), "\"truck\"");
        let back: Category = serde_json::from_str("\"truck\"").unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<Category>("\"spaceship\"").is_err());
    }
}
