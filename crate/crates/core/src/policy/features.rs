//! Feature extraction for the log-linear policy.
//!
//! Every active feature selects one row of the weight matrix; a token's logit
//! is the sum of its column over the active rows. The context is rebuilt
//! from the user prompt and the generated prefix alone.

use crate::grammar::{
    Color, Layout, ObjectClass, ObjectSlot, PromptSpec, Relation, Structure, TaskCategory, TokenId,
    TokenKind, VOCAB_SIZE,
};

/// One feature template: a name and the number of rows it owns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Table {
    pub name: &'static str,
    pub rows: usize,
}

pub const TABLES: [Table; 11] = [
    Table { name: "segment", rows: 2 },
    Table { name: "prev", rows: VOCAB_SIZE + 1 },
    Table { name: "category", rows: 6 },
    Table { name: "next_object", rows: 9 },
    Table { name: "next_color", rows: 7 },
    Table { name: "relation", rows: 5 },
    Table { name: "count", rows: 5 },
    Table { name: "count_progress", rows: 20 },
    Table { name: "objects", rows: 8 },
    Table { name: "plan", rows: 13 },
    Table { name: "bucket", rows: 4 },
];

const fn offset(index: usize) -> usize {
    let mut total = 0;
    let mut i = 0;
    while i < index {
        total += TABLES[i].rows;
        i += 1;
    }
    total
}

const SEGMENT: usize = offset(0);
const PREV: usize = offset(1);
const CATEGORY: usize = offset(2);
const NEXT_OBJECT: usize = offset(3);
const NEXT_COLOR: usize = offset(4);
const RELATION: usize = offset(5);
const COUNT: usize = offset(6);
const COUNT_PROGRESS: usize = offset(7);
const OBJECTS: usize = offset(8);
const PLAN: usize = offset(9);
const BUCKET: usize = offset(10);

/// Total rows across all tables.
pub const ROWS: usize = offset(TABLES.len());

/// First row of each table, aligned with [`TABLES`].
pub fn table_offsets() -> [usize; TABLES.len()] {
    std::array::from_fn(offset)
}

/// Upper bound on simultaneously active rows.
pub const MAX_ACTIVE: usize = 10 + 2 + 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Reason,
    Prompt,
}

/// Coarse position within the current segment.
pub fn bucket(seg_pos: usize) -> usize {
    match seg_pos {
        0..=3 => 0,
        4..=7 => 1,
        8..=15 => 2,
        _ => 3,
    }
}

/// Incremental context for one user prompt.
#[derive(Clone, Debug)]
pub struct FeatureState {
    category: TaskCategory,
    order: Vec<ObjectSlot>,
    relation: Option<Relation>,
    count: Option<u8>,
    segment: Segment,
    prev: Option<TokenId>,
    /// Tokens since, and including, the latest opening tag.
    seg_pos: usize,
    mentions: [u8; 8],
    plan: u16,
}

impl FeatureState {
    pub fn new(spec: &PromptSpec) -> Self {
        FeatureState {
            category: spec.category,
            order: spec.mention_order(),
            relation: spec.relation,
            count: spec.count,
            segment: Segment::Reason,
            prev: None,
            seg_pos: 0,
            mentions: [0; 8],
            plan: 0,
        }
    }

    pub fn segment(&self) -> Segment {
        self.segment
    }

    fn next_object(&self) -> Option<&ObjectSlot> {
        self.order
            .iter()
            .find(|slot| self.mentions[slot.class.index()] == 0)
    }

    /// Writes the active rows into `out` and returns how many there are.
    pub fn active_rows(&self, out: &mut [usize; MAX_ACTIVE]) -> usize {
        let mut n = 0;
        let mut push = |row: usize| {
            out[n] = row;
            n += 1;
        };
        push(SEGMENT + matches!(self.segment, Segment::Prompt) as usize);
        push(PREV + self.prev.map_or(VOCAB_SIZE, TokenId::index));
        push(CATEGORY + self.category.index());
        let next = self.next_object();
        push(NEXT_OBJECT + next.map_or(ObjectClass::ALL.len(), |s| s.class.index()));
        push(NEXT_COLOR + next.and_then(|s| s.color).map_or(Color::ALL.len(), Color::index));
        push(RELATION + self.relation.map_or(Relation::ALL.len(), |r| r.index()));
        push(COUNT + self.count.map_or(0, usize::from));
        if let (Some(n), Some(slot)) = (self.count, self.order.first()) {
            let seen = self.mentions[slot.class.index()].min(4) as usize;
            push(COUNT_PROGRESS + (n as usize - 1) * 5 + seen);
        }
        for slot in &self.order {
            push(OBJECTS + slot.class.index());
        }
        if self.segment == Segment::Prompt {
            for (i, _) in Layout::ALL.iter().enumerate() {
                if self.plan & (1 << i) != 0 {
                    push(PLAN + i);
                }
            }
        }
        push(BUCKET + bucket(self.seg_pos));
        n
    }

    /// Advances the context past an emitted token.
    pub fn push(&mut self, token: TokenId) {
        self.seg_pos += 1;
        match token.kind() {
            Some(TokenKind::Structure(Structure::ReasonOpen)) => self.open(),
            Some(TokenKind::Structure(Structure::PromptOpen)) => {
                self.segment = Segment::Prompt;
                self.open();
            }
            Some(TokenKind::Object(o)) => {
                let m = &mut self.mentions[o.index()];
                *m = m.saturating_add(1);
            }
            Some(TokenKind::Layout(l)) if self.segment == Segment::Reason => {
                self.plan |= 1 << l.index();
            }
            _ => {}
        }
        self.prev = Some(token);
    }

    fn open(&mut self) {
        self.seg_pos = 1;
        self.mentions = [0; 8];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::vocabulary;

    #[test]
    fn layout_is_consistent() {
        assert_eq!(ROWS, 135);
        let offs = table_offsets();
        assert_eq!(offs[0], 0);
        assert_eq!(offs[10] + TABLES[10].rows, ROWS);
        let max = 10 + 2 + Layout::ALL.len();
        assert!(max <= MAX_ACTIVE);
    }

    #[test]
    fn buckets() {
        assert_eq!([0, 3, 4, 7, 8, 15, 16, 90].map(bucket), [0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn next_object_and_plan() {
        let spec = PromptSpec::position(ObjectClass::Dog, Relation::Below, ObjectClass::Cow);
        let mut st = FeatureState::new(&spec);
        // mention order is reversed for `below`
        assert_eq!(st.next_object().unwrap().class, ObjectClass::Cow);
        for t in vocabulary().tokenize("<reason> a cow above a dog at-bottom").unwrap() {
            st.push(t);
        }
        assert!(st.next_object().is_none());
        let mut rows = [0; MAX_ACTIVE];
        let n = st.active_rows(&mut rows);
        assert!(!rows[..n].iter().any(|&r| (PLAN..PLAN + 13).contains(&r)));
        for t in vocabulary().tokenize("</reason> <prompt>").unwrap() {
            st.push(t);
        }
        assert_eq!(st.seg_pos, 1);
        assert_eq!(st.next_object().unwrap().class, ObjectClass::Cow);
        let n = st.active_rows(&mut rows);
        let plan: Vec<_> = rows[..n].iter().filter(|&&r| r >= PLAN && r < BUCKET).collect();
        assert_eq!(plan, vec![&(PLAN + Layout::Bottom.index())]);
    }
}
