use std::fmt;

use serde::{Deserialize, Serialize};

use super::vocab::{numeral, vocabulary, Color, Function, ObjectClass, Relation, TokenId, TokenKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    SingleObject,
    TwoObject,
    Counting,
    Colors,
    Position,
    AttributeBinding,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 6] = [
        TaskCategory::SingleObject,
        TaskCategory::TwoObject,
        TaskCategory::Counting,
        TaskCategory::Colors,
        TaskCategory::Position,
        TaskCategory::AttributeBinding,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskCategory::SingleObject => "single_object",
            TaskCategory::TwoObject => "two_object",
            TaskCategory::Counting => "counting",
            TaskCategory::Colors => "colors",
            TaskCategory::Position => "position",
            TaskCategory::AttributeBinding => "attribute_binding",
        }
    }

    pub fn object_count(self) -> usize {
        match self {
            TaskCategory::SingleObject | TaskCategory::Counting | TaskCategory::Colors => 1,
            _ => 2,
        }
    }

    pub fn has_colors(self) -> bool {
        matches!(self, TaskCategory::Colors | TaskCategory::AttributeBinding)
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectSlot {
    pub class: ObjectClass,
    pub color: Option<Color>,
}

impl ObjectSlot {
    pub fn plain(class: ObjectClass) -> Self {
        ObjectSlot { class, color: None }
    }

    pub fn colored(class: ObjectClass, color: Color) -> Self {
        ObjectSlot {
            class,
            color: Some(color),
        }
    }
}

/// Ground-truth constraints behind one user prompt.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: u64,
    pub category: TaskCategory,
    pub objects: Vec<ObjectSlot>,
    pub count: Option<u8>,
    pub relation: Option<Relation>,
}

/// Content of a spec without its id; two specs with equal keys are the same
/// prompt for train/eval disjointness.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpecKey {
    pub category: TaskCategory,
    pub objects: Vec<ObjectSlot>,
    pub count: Option<u8>,
    pub relation: Option<Relation>,
}

impl PromptSpec {
    pub fn single_object(class: ObjectClass) -> Self {
        Self::from_parts(TaskCategory::SingleObject, vec![ObjectSlot::plain(class)], None, None)
    }

    pub fn two_object(first: ObjectClass, second: ObjectClass) -> Self {
        Self::from_parts(
            TaskCategory::TwoObject,
            vec![ObjectSlot::plain(first), ObjectSlot::plain(second)],
            None,
            None,
        )
    }

    pub fn counting(class: ObjectClass, count: u8) -> Self {
        Self::from_parts(TaskCategory::Counting, vec![ObjectSlot::plain(class)], Some(count), None)
    }

    pub fn colors(class: ObjectClass, color: Color) -> Self {
        Self::from_parts(TaskCategory::Colors, vec![ObjectSlot::colored(class, color)], None, None)
    }

    pub fn position(first: ObjectClass, relation: Relation, second: ObjectClass) -> Self {
        Self::from_parts(
            TaskCategory::Position,
            vec![ObjectSlot::plain(first), ObjectSlot::plain(second)],
            None,
            Some(relation),
        )
    }

    pub fn attribute_binding(first: (Color, ObjectClass), second: (Color, ObjectClass)) -> Self {
        Self::from_parts(
            TaskCategory::AttributeBinding,
            vec![
                ObjectSlot::colored(first.1, first.0),
                ObjectSlot::colored(second.1, second.0),
            ],
            None,
            None,
        )
    }

    fn from_parts(
        category: TaskCategory,
        objects: Vec<ObjectSlot>,
        count: Option<u8>,
        relation: Option<Relation>,
    ) -> Self {
        PromptSpec {
            id: 0,
            category,
            objects,
            count,
            relation,
        }
    }

    pub fn with_id(mut self, id: u64) -> Self {
        self.id = id;
        self
    }

    pub fn key(&self) -> SpecKey {
        SpecKey {
            category: self.category,
            objects: self.objects.clone(),
            count: self.count,
            relation: self.relation,
        }
    }

    /// Checks that slots are populated exactly as the category requires.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Precondition(format!("{} spec: {what}", self.category)));
        if self.objects.len() != self.category.object_count() {
            return bad("wrong number of objects");
        }
        if self.objects.iter().any(|o| o.color.is_some() != self.category.has_colors()) {
            return bad("color slots do not match category");
        }
        match (self.category, self.count) {
            (TaskCategory::Counting, Some(n)) if (1..=4).contains(&n) => {}
            (TaskCategory::Counting, _) => return bad("count must be in 1..=4"),
            (_, Some(_)) => return bad("count only allowed for counting"),
            _ => {}
        }
        if (self.category == TaskCategory::Position) != self.relation.is_some() {
            return bad("relation present iff position");
        }
        if self.objects.len() == 2 && self.objects[0].class == self.objects[1].class {
            return bad("the two objects must have distinct classes");
        }
        if self.category == TaskCategory::AttributeBinding && self.objects[0].color == self.objects[1].color {
            return bad("the two colors must differ");
        }
        Ok(())
    }

    /// Relation rewritten so that the first-mentioned object is left of or
    /// above the second (`right-of` becomes `left-of` with swapped objects).
    pub fn canonical_relation(&self) -> Option<Relation> {
        self.relation.map(|r| match r {
            Relation::RightOf => Relation::LeftOf,
            Relation::Below => Relation::Above,
            other => other,
        })
    }

    /// Objects in the order a canonical phrasing mentions them.
    pub fn mention_order(&self) -> Vec<ObjectSlot> {
        let mut objects = self.objects.clone();
        if matches!(self.relation, Some(Relation::RightOf | Relation::Below)) {
            objects.reverse();
        }
        objects
    }
}

/// A user prompt: the spec together with its template rendering.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPrompt {
    pub spec: PromptSpec,
    pub tokens: Vec<TokenId>,
}

impl UserPrompt {
    pub fn new(spec: PromptSpec) -> Self {
        let tokens = render_user_prompt(&spec);
        UserPrompt { spec, tokens }
    }

    pub fn text(&self) -> String {
        vocabulary()
            .detokenize(&self.tokens)
            .expect("rendered prompts only contain vocabulary tokens")
    }
}

/// Renders the template `a photo of ...` for a spec.
pub fn render_user_prompt(spec: &PromptSpec) -> Vec<TokenId> {
    let a = TokenId::from(Function::A);
    let and = TokenId::from(Function::And);
    let mut out = vec![a, Function::Photo.into(), Function::Of.into()];
    let obj = |i: usize| TokenId::from(spec.objects[i].class);
    let color = |i: usize| TokenId::from(spec.objects[i].color.expect("validated color slot"));
    match spec.category {
        TaskCategory::SingleObject => out.extend([a, obj(0)]),
        TaskCategory::TwoObject => out.extend([a, obj(0), and, a, obj(1)]),
        TaskCategory::Counting => out.extend([numeral(spec.count.expect("validated count")), obj(0)]),
        TaskCategory::Colors => out.extend([a, color(0), obj(0)]),
        TaskCategory::Position => out.extend([
            a,
            obj(0),
            spec.relation.expect("validated relation").into(),
            a,
            obj(1),
        ]),
        TaskCategory::AttributeBinding => {
            out.extend([a, color(0), obj(0), and, a, color(1), obj(1)])
        }
    }
    out
}

/// Inverse of [`render_user_prompt`] up to the spec id.
pub fn parse_user_prompt(tokens: &[TokenId]) -> Result<PromptSpec> {
    let vocab = vocabulary();
    let kinds = tokens
        .iter()
        .map(|&t| vocab.kind(t))
        .collect::<Result<Vec<_>>>()?;
    use TokenKind as K;
    const A: K = K::Function(Function::A);
    const AND: K = K::Function(Function::And);
    let body = match kinds.as_slice() {
        [A, K::Function(Function::Photo), K::Function(Function::Of), rest @ ..] => rest,
        _ => return Err(Error::UnrecognizedPrompt),
    };
    let spec = match *body {
        [A, K::Object(o)] => PromptSpec::single_object(o),
        [A, K::Object(o1), AND, A, K::Object(o2)] => PromptSpec::two_object(o1, o2),
        [K::Numeral(n), K::Object(o)] => PromptSpec::counting(o, n),
        [A, K::Color(c), K::Object(o)] => PromptSpec::colors(o, c),
        [A, K::Object(o1), K::Relation(r), A, K::Object(o2)] => PromptSpec::position(o1, r, o2),
        [A, K::Color(c1), K::Object(o1), AND, A, K::Color(c2), K::Object(o2)] => {
            PromptSpec::attribute_binding((c1, o1), (c2, o2))
        }
        _ => return Err(Error::UnrecognizedPrompt),
    };
    spec.validate().map_err(|_| Error::UnrecognizedPrompt)?;
    Ok(spec)
}

/// Every distinct valid spec of a category, in a fixed enumeration order.
pub fn spec_space(category: TaskCategory) -> Vec<PromptSpec> {
    let classes = ObjectClass::ALL;
    let colors = Color::ALL;
    let pairs = || {
        classes
            .iter()
            .flat_map(|&a| classes.iter().filter(move |&&b| b != a).map(move |&b| (a, b)))
    };
    match category {
        TaskCategory::SingleObject => classes.iter().map(|&c| PromptSpec::single_object(c)).collect(),
        TaskCategory::TwoObject => pairs().map(|(a, b)| PromptSpec::two_object(a, b)).collect(),
        TaskCategory::Counting => (1..=4)
            .flat_map(|n| classes.iter().map(move |&c| PromptSpec::counting(c, n)))
            .collect(),
        TaskCategory::Colors => colors
            .iter()
            .flat_map(|&col| classes.iter().map(move |&c| PromptSpec::colors(c, col)))
            .collect(),
        TaskCategory::Position => pairs()
            .flat_map(|(a, b)| Relation::ALL.iter().map(move |&r| PromptSpec::position(a, r, b)))
            .collect(),
        TaskCategory::AttributeBinding => pairs()
            .flat_map(|(a, b)| {
                colors.iter().flat_map(move |&ca| {
                    colors
                        .iter()
                        .filter(move |&&cb| cb != ca)
                        .map(move |&cb| PromptSpec::attribute_binding((ca, a), (cb, b)))
                })
            })
            .collect(),
    }
}
