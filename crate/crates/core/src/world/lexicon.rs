//! Fixed vocabulary the synthetic catalog is composed from.

pub struct LeafSpec {
    pub id: &'static str,
    pub dept: &'static str,
    /// Query-side phrase per language: (en, es).
    pub term_en: &'static str,
    pub term_es: &'static str,
    /// Phrase used in product titles.
    pub title_term: &'static str,
    pub attr_classes: &'static [&'static str],
    pub audience_capable: bool,
    pub visual_tag: &'static str,
}

pub struct AttrClass {
    pub name: &'static str,
    /// (en, es) value pairs. The canonical value is the English one.
    pub values: &'static [(&'static str, &'static str)],
}

pub const DEPARTMENTS: &[(&str, &[&str])] = &[
    ("shoes", &["nike", "adidas", "puma", "asics"]),
    ("clothing", &["zara", "shein", "mango"]),
    ("electronics", &["sony", "apple", "samsung", "anker"]),
    ("costumes", &["rubies", "partyking"]),
    ("home", &["ikea", "muji"]),
    ("sports", &["hydroflask", "lululemon"]),
];

pub const LEAVES: &[LeafSpec] = &[
    LeafSpec { id: "basketball_shoes", dept: "shoes", term_en: "basketball shoes", term_es: "zapatillas de baloncesto", title_term: "basketball shoes", attr_classes: &["color", "style", "material"], audience_capable: true, visual_tag: "shoe" },
    LeafSpec { id: "soccer_shoes", dept: "shoes", term_en: "soccer shoes", term_es: "botas de futbol", title_term: "soccer shoes", attr_classes: &["color", "material"], audience_capable: true, visual_tag: "shoe" },
    LeafSpec { id: "running_shoes", dept: "shoes", term_en: "running shoes", term_es: "zapatillas para correr", title_term: "running shoes", attr_classes: &["color", "material"], audience_capable: true, visual_tag: "shoe" },
    LeafSpec { id: "trail_shoes", dept: "shoes", term_en: "trail shoes", term_es: "zapatillas de montana", title_term: "trail shoes", attr_classes: &["color"], audience_capable: true, visual_tag: "shoe" },
    LeafSpec { id: "sandals", dept: "shoes", term_en: "sandals", term_es: "sandalias", title_term: "sandals", attr_classes: &["color", "material"], audience_capable: true, visual_tag: "shoe" },
    LeafSpec { id: "womens_blouses", dept: "clothing", term_en: "womens blouses", term_es: "blusas de mujer", title_term: "womens blouse", attr_classes: &["color", "style", "material"], audience_capable: false, visual_tag: "top" },
    LeafSpec { id: "womens_tanks_camis", dept: "clothing", term_en: "womens tanks and camis", term_es: "camisetas de tirantes", title_term: "cami top", attr_classes: &["color", "style", "material"], audience_capable: false, visual_tag: "top" },
    LeafSpec { id: "dresses", dept: "clothing", term_en: "dresses", term_es: "vestidos", title_term: "dress", attr_classes: &["color", "style", "material"], audience_capable: true, visual_tag: "dress" },
    LeafSpec { id: "clothing_sets", dept: "clothing", term_en: "clothing sets", term_es: "conjuntos de ropa", title_term: "clothing set", attr_classes: &["color", "style"], audience_capable: true, visual_tag: "set" },
    LeafSpec { id: "mens_tshirts", dept: "clothing", term_en: "mens t-shirts", term_es: "camisetas de hombre", title_term: "mens t-shirt", attr_classes: &["color", "material"], audience_capable: false, visual_tag: "top" },
    LeafSpec { id: "headphones", dept: "electronics", term_en: "headphones", term_es: "auriculares", title_term: "headphones", attr_classes: &["color", "style"], audience_capable: false, visual_tag: "gadget" },
    LeafSpec { id: "phone_cases", dept: "electronics", term_en: "phone cases", term_es: "fundas de telefono", title_term: "phone case", attr_classes: &["color", "material"], audience_capable: false, visual_tag: "gadget" },
    LeafSpec { id: "chargers", dept: "electronics", term_en: "chargers", term_es: "cargadores", title_term: "charger", attr_classes: &["style", "color"], audience_capable: false, visual_tag: "gadget" },
    LeafSpec { id: "smart_watches", dept: "electronics", term_en: "smart watches", term_es: "relojes inteligentes", title_term: "smart watch", attr_classes: &["color"], audience_capable: false, visual_tag: "gadget" },
    LeafSpec { id: "mascot_suits", dept: "costumes", term_en: "mascot suits", term_es: "disfraces de mascota", title_term: "mascot suit", attr_classes: &["color", "texture"], audience_capable: true, visual_tag: "mascot" },
    LeafSpec { id: "party_masks", dept: "costumes", term_en: "party masks", term_es: "mascaras de fiesta", title_term: "party mask", attr_classes: &["color"], audience_capable: false, visual_tag: "mask" },
    LeafSpec { id: "coffee_mugs", dept: "home", term_en: "coffee mugs", term_es: "tazas de cafe", title_term: "coffee mug", attr_classes: &["color", "material"], audience_capable: false, visual_tag: "mug" },
    LeafSpec { id: "throw_pillows", dept: "home", term_en: "throw pillows", term_es: "cojines", title_term: "throw pillow", attr_classes: &["color", "texture"], audience_capable: false, visual_tag: "pillow" },
    LeafSpec { id: "desk_lamps", dept: "home", term_en: "desk lamps", term_es: "lamparas de escritorio", title_term: "desk lamp", attr_classes: &["color"], audience_capable: false, visual_tag: "lamp" },
    LeafSpec { id: "yoga_mats", dept: "sports", term_en: "yoga mats", term_es: "esterillas de yoga", title_term: "yoga mat", attr_classes: &["color", "material"], audience_capable: false, visual_tag: "mat" },
    LeafSpec { id: "water_bottles", dept: "sports", term_en: "water bottles", term_es: "botellas de agua", title_term: "water bottle", attr_classes: &["color", "material"], audience_capable: true, visual_tag: "bottle" },
];

pub const ATTR_CLASSES: &[AttrClass] = &[
    AttrClass {
        name: "color",
        values: &[
            ("red", "rojo"),
            ("black", "negro"),
            ("white", "blanco"),
            ("blue", "azul"),
            ("orange", "naranja"),
            ("green", "verde"),
            ("pink", "rosa"),
            ("yellow", "amarillo"),
        ],
    },
    AttrClass {
        name: "style",
        values: &[
            ("high-top", "cana-alta"),
            ("low-top", "cana-baja"),
            ("sexy", "sexy"),
            ("casual", "informal"),
            ("wireless", "inalambrico"),
            ("wired", "con-cable"),
        ],
    },
    AttrClass {
        name: "material",
        values: &[
            ("leather", "cuero"),
            ("mesh", "malla"),
            ("silk", "seda"),
            ("cotton", "algodon"),
            ("silicone", "silicona"),
            ("ceramic", "ceramica"),
            ("glass", "vidrio"),
            ("steel", "acero"),
        ],
    },
    AttrClass { name: "texture", values: &[("furry", "peludo"), ("smooth", "liso")] },
    AttrClass { name: "audience", values: &[("kids", "ninos")] },
];

/// Per-leaf admissible style values (other classes accept every value).
pub fn styles_for(leaf: &str) -> &'static [&'static str] {
    match leaf {
        "basketball_shoes" => &["high-top", "low-top"],
        "womens_blouses" | "womens_tanks_camis" | "dresses" | "clothing_sets" => &["sexy", "casual"],
        "headphones" | "chargers" => &["wireless", "wired"],
        _ => &[],
    }
}

pub fn materials_for(leaf: &str) -> &'static [&'static str] {
    match leaf {
        "basketball_shoes" | "soccer_shoes" | "running_shoes" | "sandals" => &["leather", "mesh"],
        "womens_blouses" | "womens_tanks_camis" | "dresses" => &["silk", "cotton"],
        "mens_tshirts" => &["cotton"],
        "phone_cases" => &["silicone", "leather"],
        "coffee_mugs" => &["ceramic", "glass"],
        "yoga_mats" => &["silicone"],
        "water_bottles" => &["glass", "steel"],
        _ => &[],
    }
}

pub struct EntitySpec {
    pub name: &'static str,
    pub fact: &'static str,
    pub leaf: &'static str,
    pub attributes: &'static [(&'static str, &'static str)],
    pub image_ref: &'static str,
    pub visual_tags: &'static [&'static str],
}

pub const ENTITIES: &[EntitySpec] = &[
    EntitySpec {
        name: "lorax",
        fact: "The Lorax is a short orange furry creature with a bushy yellow mustache; costumes are orange furry mascot suits",
        leaf: "mascot_suits",
        attributes: &[("color", "orange"), ("texture", "furry")],
        image_ref: "img://web/lorax-costume.jpg",
        visual_tags: &["orange", "furry", "mascot"],
    },
    EntitySpec {
        name: "grinch",
        fact: "The Grinch is a green furry character; costumes are green furry mascot suits",
        leaf: "mascot_suits",
        attributes: &[("color", "green"), ("texture", "furry")],
        image_ref: "img://web/grinch-costume.jpg",
        visual_tags: &["green", "furry", "mascot"],
    },
    EntitySpec {
        name: "cookie monster",
        fact: "Cookie Monster is a blue furry puppet; costumes are blue furry mascot suits",
        leaf: "mascot_suits",
        attributes: &[("color", "blue"), ("texture", "furry")],
        image_ref: "img://web/cookie-monster-costume.jpg",
        visual_tags: &["blue", "furry", "mascot"],
    },
];

pub fn leaf(id: &str) -> Option<&'static LeafSpec> {
    LEAVES.iter().find(|l| l.id == id)
}

pub fn attr_class(name: &str) -> Option<&'static AttrClass> {
    ATTR_CLASSES.iter().find(|c| c.name == name)
}

pub fn brands_for(dept: &str) -> &'static [&'static str] {
    DEPARTMENTS.iter().find(|(d, _)| *d == dept).map(|(_, b)| *b).unwrap_or(&[])
}

/// Admissible values for an attribute class on a leaf.
pub fn values_for(leaf: &str, class: &str) -> Vec<&'static str> {
    match class {
        "style" => styles_for(leaf).to_vec(),
        "material" => materials_for(leaf).to_vec(),
        _ => attr_class(class).map(|c| c.values.iter().map(|(en, _)| *en).collect()).unwrap_or_default(),
    }
}

/// Spanish surface form of an English attribute value.
pub fn value_es(class: &str, en: &str) -> &'static str {
    attr_class(class)
        .and_then(|c| c.values.iter().find(|(e, _)| *e == en))
        .map(|(_, es)| *es)
        .unwrap_or("")
}
