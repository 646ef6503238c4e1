use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CoolError;
use crate::extraction::{Branches, KgPooling, KnowledgeOptions};

/// Model variant: the full model or one ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum AblationVariant {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "wo_KG")]
    WoKg,
    #[serde(rename = "wo_KC")]
    WoKc,
    #[serde(rename = "wo_CK")]
    WoCk,
    #[serde(rename = "KG_mean")]
    KgMean,
    #[serde(rename = "wo_Pos")]
    WoPos,
    #[serde(rename = "wo_Neg")]
    WoNeg,
    #[serde(rename = "wo_Prefix")]
    WoPrefix,
    #[serde(rename = "wo_Postfix")]
    WoPostfix,
    #[serde(rename = "wo_AD")]
    WoAd,
    #[serde(rename = "wo_CL")]
    WoCl,
    #[serde(rename = "wo_ACT")]
    WoAct,
}

/// Model components a variant can switch off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    StructuredKnowledge,
    DescriptiveKnowledge,
    ModulationPooling,
    ComprehensiveKnowledge,
    PositiveAttention,
    NegativeAttention,
    PrefixAveraging,
    HardPrompt,
    Adversarial,
    Contrastive,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 12] = [
        Self::Full,
        Self::WoKg,
        Self::WoKc,
        Self::WoCk,
        Self::KgMean,
        Self::WoPos,
        Self::WoNeg,
        Self::WoPrefix,
        Self::WoPostfix,
        Self::WoAd,
        Self::WoCl,
        Self::WoAct,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WoKg => "wo_KG",
            Self::WoKc => "wo_KC",
            Self::WoCk => "wo_CK",
            Self::KgMean => "KG_mean",
            Self::WoPos => "wo_Pos",
            Self::WoNeg => "wo_Neg",
            Self::WoPrefix => "wo_Prefix",
            Self::WoPostfix => "wo_Postfix",
            Self::WoAd => "wo_AD",
            Self::WoCl => "wo_CL",
            Self::WoAct => "wo_ACT",
        }
    }

    /// Components this variant removes or replaces.
    pub fn removed(self) -> &'static [Component] {
        use Component::*;
        match self {
            Self::Full => &[],
            Self::WoKg => &[StructuredKnowledge],
            Self::WoKc => &[DescriptiveKnowledge],
            Self::WoCk => &[ComprehensiveKnowledge],
            Self::KgMean => &[ModulationPooling],
            Self::WoPos => &[PositiveAttention],
            Self::WoNeg => &[NegativeAttention],
            Self::WoPrefix => &[PrefixAveraging],
            Self::WoPostfix => &[HardPrompt],
            Self::WoAd => &[Adversarial],
            Self::WoCl => &[Contrastive],
            Self::WoAct => &[Adversarial, Contrastive],
        }
    }

    /// [`removed`](Self::removed) plus the parts that only exist inside a
    /// removed component (modulation pools structured knowledge; everything
    /// on the knowledge path sits inside comprehensive knowledge).
    pub fn disabled(self) -> std::collections::BTreeSet<Component> {
        use Component::*;
        let mut out: std::collections::BTreeSet<Component> = self.removed().iter().copied().collect();
        if out.contains(&StructuredKnowledge) {
            out.insert(ModulationPooling);
        }
        if out.contains(&ComprehensiveKnowledge) {
            out.extend([
                StructuredKnowledge,
                DescriptiveKnowledge,
                ModulationPooling,
                PositiveAttention,
                NegativeAttention,
            ]);
        }
        out
    }

    pub fn has(self, c: Component) -> bool {
        !self.removed().contains(&c)
    }

    pub fn knowledge_options(self, base: KnowledgeOptions) -> KnowledgeOptions {
        KnowledgeOptions {
            pooling: if self.has(Component::ModulationPooling) {
                base.pooling
            } else {
                KgPooling::Mean
            },
            use_structured: base.use_structured && self.has(Component::StructuredKnowledge),
            use_descriptive: base.use_descriptive && self.has(Component::DescriptiveKnowledge),
            news_repr: base.news_repr,
        }
    }

    pub fn branches(self) -> Branches {
        Branches {
            positive: self.has(Component::PositiveAttention),
            negative: self.has(Component::NegativeAttention),
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AblationVariant {
    type Err = CoolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| CoolError::UnknownVariant(s.to_string()))
    }
}
