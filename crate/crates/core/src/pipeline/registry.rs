use std::collections::BTreeMap;

use super::params::{self, QueryKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SmartAddress,
    ParseProject,
    Decrypt,
    Select,
    Regex,
    Distinct,
    GroupBy,
    Aggregate,
    Encrypt,
    Pack,
    Send,
}

impl Stage {
    fn inspects_content(self) -> bool {
        matches!(self, Stage::Select | Stage::Regex | Stage::Distinct | Stage::GroupBy | Stage::Aggregate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lanes {
    One,
    /// One lane per 64 bytes of channel width a tuple occupies.
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineSpec {
    pub id: u16,
    pub name: &'static str,
    pub stages: Vec<Stage>,
    pub lanes: Lanes,
    pub kind: QueryKind,
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<(), String> {
        let s = &self.stages;
        if !matches!(s.first(), Some(Stage::ParseProject | Stage::SmartAddress | Stage::Decrypt)) {
            return Err(format!("{}: must start by reading tuples", self.name));
        }
        if !s.ends_with(&[Stage::Pack, Stage::Send]) {
            return Err(format!("{}: must end with pack and send", self.name));
        }
        if let Some(d) = s.iter().position(|&x| x == Stage::Decrypt) {
            if s[..d].iter().any(|x| x.inspects_content()) {
                return Err(format!("{}: decrypt after a content stage", self.name));
            }
        }
        if s.contains(&Stage::Distinct) && s.contains(&Stage::GroupBy) {
            return Err(format!("{}: distinct and group by together", self.name));
        }
        Ok(())
    }

    pub fn has(&self, st: Stage) -> bool {
        self.stages.contains(&st)
    }
}

/// The precompiled pipelines a node can load, keyed by id.
#[derive(Debug, Clone)]
pub struct PipelineRegistry {
    entries: BTreeMap<u16, PipelineSpec>,
}

impl PipelineRegistry {
    pub fn builtin() -> Self {
        use Stage::*;
        let specs = [
            (params::SELECT, "select", vec![ParseProject, Select, Pack, Send], Lanes::One, QueryKind::Select),
            (
                params::SELECT_VEC,
                "select-vectorized",
                vec![ParseProject, Select, Pack, Send],
                Lanes::PerChannel,
                QueryKind::Select,
            ),
            (
                params::SMART_SELECT,
                "select-smart-addressing",
                vec![SmartAddress, ParseProject, Select, Pack, Send],
                Lanes::One,
                QueryKind::Select,
            ),
            (params::DISTINCT, "distinct", vec![ParseProject, Distinct, Pack, Send], Lanes::One, QueryKind::Distinct),
            (
                params::GROUP_BY,
                "group-by",
                vec![ParseProject, GroupBy, Aggregate, Pack, Send],
                Lanes::One,
                QueryKind::GroupBy,
            ),
            (params::REGEX, "regex", vec![ParseProject, Regex, Pack, Send], Lanes::One, QueryKind::Regex),
            (
                params::CRYPTO_SELECT,
                "decrypt-select-encrypt",
                vec![Decrypt, ParseProject, Select, Encrypt, Pack, Send],
                Lanes::One,
                QueryKind::CryptoSelect,
            ),
        ];
        let mut entries = BTreeMap::new();
        for (id, name, stages, lanes, kind) in specs {
            entries.insert(
                id,
                PipelineSpec {
                    id,
                    name,
                    stages,
                    lanes,
                    kind,
                },
            );
        }
        PipelineRegistry { entries }
    }

    pub fn get(&self, id: u16) -> Option<&PipelineSpec> {
        self.entries.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u16> + '_ {
        self.entries.keys().copied()
    }
}
