use std::fmt;

use crate::operators::Variant;
use crate::relation::{Comparator, Granularity};

use super::PlanError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImputeSpec {
    Cells,
    Column(String),
    Rows(usize),
}

/// One operator in a plan tree. Every node but the scans has exactly one
/// input; a match join names its second relation directly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanNode {
    Scan(String),
    ScanDatabase,
    Project {
        input: Box<PlanNode>,
        columns: Vec<String>,
    },
    Filter {
        input: Box<PlanNode>,
        column: String,
        op: Comparator,
        literal: String,
    },
    LroSelect {
        input: Box<PlanNode>,
        g: Granularity,
        requirement: String,
        variant: Option<Variant>,
    },
    LroMatchJoin {
        input: Box<PlanNode>,
        other: String,
        g: Granularity,
        keys: Option<(String, String)>,
        requirement: String,
        variant: Option<Variant>,
    },
    LroImpute {
        input: Box<PlanNode>,
        target: ImputeSpec,
        requirement: String,
        variant: Option<Variant>,
    },
    LroCluster {
        input: Box<PlanNode>,
        g: Granularity,
        requirement: String,
        variant: Option<Variant>,
    },
    LroOrder {
        input: Box<PlanNode>,
        requirement: String,
        variant: Option<Variant>,
    },
    OrderBy {
        input: Box<PlanNode>,
        column: String,
        descending: bool,
    },
    GroupBy {
        input: Box<PlanNode>,
        columns: Vec<String>,
    },
    Limit {
        input: Box<PlanNode>,
        n: usize,
    },
}

impl PlanNode {
    pub fn input(&self) -> Option<&PlanNode> {
        match self {
            Self::Scan(_) | Self::ScanDatabase => None,
            Self::Project { input, .. }
            | Self::Filter { input, .. }
            | Self::LroSelect { input, .. }
            | Self::LroMatchJoin { input, .. }
            | Self::LroImpute { input, .. }
            | Self::LroCluster { input, .. }
            | Self::LroOrder { input, .. }
            | Self::OrderBy { input, .. }
            | Self::GroupBy { input, .. }
            | Self::Limit { input, .. } => Some(input),
        }
    }

    pub fn is_lro(&self) -> bool {
        matches!(
            self,
            Self::LroSelect { .. }
                | Self::LroMatchJoin { .. }
                | Self::LroImpute { .. }
                | Self::LroCluster { .. }
                | Self::LroOrder { .. }
        )
    }

    /// Nodes from this one down to the scan.
    pub fn chain(&self) -> Vec<&PlanNode> {
        let mut out = vec![self];
        let mut cur = self;
        while let Some(next) = cur.input() {
            out.push(next);
            cur = next;
        }
        out
    }

    /// Short description used in traces and errors.
    pub fn label(&self) -> String {
        let v = |v: &Option<Variant>| v.map(|v| format!(" USING {v}")).unwrap_or_default();
        match self {
            Self::Scan(r) => format!("Scan({r})"),
            Self::ScanDatabase => "Scan(DATABASE)".into(),
            Self::Project { columns, .. } => format!("Project({})", columns.join(", ")),
            Self::Filter {
                column,
                op,
                literal,
                ..
            } => format!("Filter({column} {} {literal})", op.as_str()),
            Self::LroSelect { g, variant, .. } => format!("LroSelect({g}{})", v(variant)),
            Self::LroMatchJoin {
                other, g, variant, ..
            } => format!("LroMatchJoin({other}, {g}{})", v(variant)),
            Self::LroImpute {
                target, variant, ..
            } => {
                let t = match target {
                    ImputeSpec::Cells => "cell".to_string(),
                    ImputeSpec::Column(c) => format!("column {c}"),
                    ImputeSpec::Rows(n) => format!("row x{n}"),
                };
                format!("LroImpute({t}{})", v(variant))
            }
            Self::LroCluster { g, variant, .. } => format!("LroCluster({g}{})", v(variant)),
            Self::LroOrder { variant, .. } => format!("LroOrder(row{})", v(variant)),
            Self::OrderBy {
                column, descending, ..
            } => {
                format!(
                    "OrderBy({column} {})",
                    if *descending { "DESC" } else { "ASC" }
                )
            }
            Self::GroupBy { columns, .. } => format!("GroupBy({})", columns.join(", ")),
            Self::Limit { n, .. } => format!("Limit({n})"),
        }
    }
}

/// A validated plan tree in a shape the dialect can express.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    root: PlanNode,
}

impl Plan {
    pub fn new(root: PlanNode) -> Result<Self, PlanError> {
        Form::of(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &PlanNode {
        &self.root
    }

    pub fn lro_count(&self) -> usize {
        self.root.chain().iter().filter(|n| n.is_lro()).count()
    }

    /// Whether the result's row order is meaningful: true when the last
    /// reordering step is an ORDER BY or an LLM order.
    pub fn order_sensitive(&self) -> bool {
        self.root
            .chain()
            .iter()
            .find(|n| !matches!(n, PlanNode::Limit { .. } | PlanNode::Project { .. }))
            .is_some_and(|n| matches!(n, PlanNode::OrderBy { .. } | PlanNode::LroOrder { .. }))
    }

    pub fn relations(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for n in self.root.chain() {
            match n {
                PlanNode::Scan(r) | PlanNode::LroMatchJoin { other: r, .. } => out.push(r.as_str()),
                _ => {}
            }
        }
        out.reverse();
        out
    }
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_plan(self))
    }
}

/// Breakdown of a plan into the clauses of its text form.
pub(crate) enum Form<'a> {
    Call(&'a PlanNode),
    Query(Query<'a>),
}

#[derive(Default)]
pub(crate) struct Query<'a> {
    pub from: &'a str,
    pub join: Option<&'a PlanNode>,
    pub filters: Vec<&'a PlanNode>,
    pub lro_filters: Vec<&'a PlanNode>,
    pub impute: Option<&'a PlanNode>,
    pub group: Option<&'a PlanNode>,
    pub order: Option<&'a PlanNode>,
    pub project: Option<&'a [String]>,
    pub limit: Option<usize>,
}

fn shape_err(msg: impl Into<String>) -> PlanError {
    PlanError::Shape(msg.into())
}

impl<'a> Form<'a> {
    pub(crate) fn of(root: &'a PlanNode) -> Result<Self, PlanError> {
        if root.is_lro() {
            if let Some(input @ (PlanNode::Scan(_) | PlanNode::ScanDatabase)) = root.input() {
                check_call(root, input)?;
                return Ok(Form::Call(root));
            }
        }
        let chain = root.chain();
        let mut q = Query::default();
        let mut i = 0;
        let at = |i: usize| chain.get(i).copied();
        if let Some(PlanNode::Limit { n, .. }) = at(i) {
            q.limit = Some(*n);
            i += 1;
        }
        if let Some(PlanNode::Project { columns, .. }) = at(i) {
            if columns.is_empty() {
                return Err(shape_err("projection needs at least one column"));
            }
            q.project = Some(columns);
            i += 1;
        }
        if let Some(n @ (PlanNode::OrderBy { .. } | PlanNode::LroOrder { .. })) = at(i) {
            q.order = Some(n);
            i += 1;
        }
        match at(i) {
            Some(n @ PlanNode::GroupBy { columns, .. }) => {
                if columns.is_empty() {
                    return Err(shape_err("GROUP BY needs at least one column"));
                }
                q.group = Some(n);
                i += 1;
            }
            Some(
                n @ PlanNode::LroCluster {
                    g: Granularity::Row,
                    ..
                },
            ) => {
                q.group = Some(n);
                i += 1;
            }
            _ => {}
        }
        if let Some(n @ PlanNode::LroImpute { target, .. }) = at(i) {
            if matches!(target, ImputeSpec::Rows(_)) {
                return Err(shape_err(
                    "row imputation only appears as a standalone call",
                ));
            }
            q.impute = Some(n);
            i += 1;
        }
        while let Some(n @ PlanNode::LroSelect { g, .. }) = at(i) {
            if *g != Granularity::Row {
                return Err(shape_err("only row-wise LLM_SELECT may appear in WHERE"));
            }
            q.lro_filters.push(n);
            i += 1;
        }
        while let Some(n @ PlanNode::Filter { .. }) = at(i) {
            q.filters.push(n);
            i += 1;
        }
        if let Some(n @ PlanNode::LroMatchJoin { g, keys, .. }) = at(i) {
            match (g, keys) {
                (Granularity::Cell, Some(_)) | (Granularity::Row, None) => {}
                _ => {
                    return Err(shape_err(
                        "JOIN needs a cell-wise match with keys or a row-wise match",
                    ))
                }
            }
            q.join = Some(n);
            i += 1;
        }
        match at(i) {
            Some(PlanNode::Scan(r)) if i + 1 == chain.len() => q.from = r,
            Some(n) => return Err(shape_err(format!("{} cannot appear here", n.label()))),
            None => return Err(shape_err("plan has no scan")),
        }
        q.lro_filters.reverse();
        q.filters.reverse();
        if let (
            Some(PlanNode::LroImpute {
                target: ImputeSpec::Column(c),
                ..
            }),
            Some(cols),
        ) = (q.impute, q.project)
        {
            if cols.iter().filter(|x| *x == c).count() != 1 {
                return Err(shape_err(format!(
                    "projection must list the imputed column `{c}` once"
                )));
            }
        }
        Ok(Form::Query(q))
    }
}

fn check_call(node: &PlanNode, input: &PlanNode) -> Result<(), PlanError> {
    use Granularity::*;
    let db = matches!(input, PlanNode::ScanDatabase);
    let ok = match node {
        PlanNode::LroSelect { g, .. } | PlanNode::LroCluster { g, .. } => match g {
            Table => db,
            Row | Column => !db,
            Cell => false,
        },
        PlanNode::LroMatchJoin { g, keys, .. } => {
            !db && matches!((g, keys), (Cell, Some(_)) | (Row, None) | (Column, None))
        }
        _ => !db,
    };
    if ok {
        Ok(())
    } else {
        Err(shape_err(format!(
            "{} cannot read {}",
            node.label(),
            input.label()
        )))
    }
}

fn quote_str(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        match c {
            '\'' | '\\' => {
                out.push('\\');
                out.push(c);
            }
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('\'');
    out
}

pub(crate) const KEYWORDS: [&str; 15] = [
    "SELECT", "FROM", "WHERE", "AND", "JOIN", "ON", "GROUP", "BY", "ORDER", "ASC", "DESC", "LIMIT",
    "USING", "DATABASE", "AS",
];

pub(crate) fn is_plain_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_' || c == '.')
        && !KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(s))
        && !s.to_ascii_uppercase().starts_with("LLM_")
}

fn ident(s: &str) -> String {
    if is_plain_ident(s) {
        s.to_string()
    } else {
        let mut out = String::from("`");
        for c in s.chars() {
            if c == '`' || c == '\\' {
                out.push('\\');
            }
            out.push(c);
        }
        out.push('`');
        out
    }
}

fn is_number_literal(s: &str) -> bool {
    let t = s.strip_prefix('-').unwrap_or(s);
    let mut parts = t.splitn(2, '.');
    let int = parts.next().unwrap_or("");
    let ok_int = !int.is_empty() && int.chars().all(|c| c.is_ascii_digit());
    match parts.next() {
        None => ok_int,
        Some(frac) => ok_int && !frac.is_empty() && frac.chars().all(|c| c.is_ascii_digit()),
    }
}

fn literal(s: &str) -> String {
    if is_number_literal(s) {
        s.to_string()
    } else {
        quote_str(s)
    }
}

fn using(v: &Option<Variant>) -> String {
    v.map(|v| format!(" USING {v}")).unwrap_or_default()
}

fn gran(g: Granularity) -> String {
    quote_str(g.as_str())
}

fn render_call(node: &PlanNode) -> String {
    let src = |n: &PlanNode| match n.input() {
        Some(PlanNode::Scan(r)) => ident(r),
        _ => "DATABASE".into(),
    };
    match node {
        PlanNode::LroSelect {
            g,
            requirement,
            variant,
            ..
        } => {
            format!(
                "LLM_SELECT({}, {}, {}{})",
                src(node),
                gran(*g),
                quote_str(requirement),
                using(variant)
            )
        }
        PlanNode::LroCluster {
            g,
            requirement,
            variant,
            ..
        } => {
            format!(
                "LLM_CLUSTER({}, {}, {}{})",
                src(node),
                gran(*g),
                quote_str(requirement),
                using(variant)
            )
        }
        PlanNode::LroOrder {
            requirement,
            variant,
            ..
        } => {
            format!(
                "LLM_ORDER({}, 'row', {}{})",
                src(node),
                quote_str(requirement),
                using(variant)
            )
        }
        PlanNode::LroImpute {
            target,
            requirement,
            variant,
            ..
        } => {
            let t = match target {
                ImputeSpec::Cells => "'cell'".to_string(),
                ImputeSpec::Column(c) => format!("'column', {}", quote_str(c)),
                ImputeSpec::Rows(n) => format!("'row', {n}"),
            };
            format!(
                "LLM_IMPUTE({}, {t}, {}{})",
                src(node),
                quote_str(requirement),
                using(variant)
            )
        }
        PlanNode::LroMatchJoin {
            other,
            g,
            keys,
            requirement,
            variant,
            ..
        } => {
            let k = keys
                .as_ref()
                .map(|(a, b)| format!(", {}, {}", ident(a), ident(b)))
                .unwrap_or_default();
            format!(
                "LLM_MATCH({}, {}, {}{k}, {}{})",
                src(node),
                ident(other),
                gran(*g),
                quote_str(requirement),
                using(variant)
            )
        }
        _ => unreachable!("call form holds an LRO node"),
    }
}

fn impute_item(node: &PlanNode) -> String {
    let PlanNode::LroImpute {
        target,
        requirement,
        variant,
        ..
    } = node
    else {
        unreachable!("impute node")
    };
    match target {
        ImputeSpec::Column(c) => format!(
            "LLM_IMPUTE('column', {}, {}{})",
            quote_str(c),
            quote_str(requirement),
            using(variant)
        ),
        _ => format!(
            "LLM_IMPUTE('cell', {}{})",
            quote_str(requirement),
            using(variant)
        ),
    }
}

/// Canonical text of a plan; parsing it gives back an equal plan.
pub fn render_plan(plan: &Plan) -> String {
    let q = match Form::of(plan.root()).expect("validated plan") {
        Form::Call(n) => return format!("{};", render_call(n)),
        Form::Query(q) => q,
    };
    let mut items: Vec<String> = Vec::new();
    let new_col = match q.impute {
        Some(PlanNode::LroImpute {
            target: ImputeSpec::Column(c),
            ..
        }) => Some(c.as_str()),
        _ => None,
    };
    match q.project {
        Some(cols) => {
            for c in cols {
                if Some(c.as_str()) == new_col {
                    items.push(impute_item(q.impute.expect("impute node")));
                } else {
                    items.push(ident(c));
                }
            }
            if let (Some(n), None) = (q.impute, new_col) {
                items.push(impute_item(n));
            }
        }
        None => {
            items.push("*".into());
            if let Some(n) = q.impute {
                items.push(impute_item(n));
            }
        }
    }
    let mut out = format!("SELECT {} FROM {}", items.join(", "), ident(q.from));
    if let Some(PlanNode::LroMatchJoin {
        other,
        g,
        keys,
        requirement,
        variant,
        ..
    }) = q.join
    {
        let k = keys
            .as_ref()
            .map(|(a, b)| format!(", {}, {}", ident(a), ident(b)))
            .unwrap_or_default();
        out.push_str(&format!(
            "\nJOIN {} ON LLM_MATCH({}{k}, {}{})",
            ident(other),
            gran(*g),
            quote_str(requirement),
            using(variant)
        ));
    }
    let mut preds: Vec<String> = Vec::new();
    for f in &q.filters {
        if let PlanNode::Filter {
            column,
            op,
            literal: lit,
            ..
        } = f
        {
            preds.push(format!(
                "{} {} {}",
                ident(column),
                op.as_str(),
                literal(lit)
            ));
        }
    }
    for f in &q.lro_filters {
        if let PlanNode::LroSelect {
            requirement,
            variant,
            ..
        } = f
        {
            preds.push(format!(
                "LLM_SELECT('row', {}{})",
                quote_str(requirement),
                using(variant)
            ));
        }
    }
    if !preds.is_empty() {
        out.push_str(&format!("\nWHERE {}", preds.join("\n  AND ")));
    }
    match q.group {
        Some(PlanNode::GroupBy { columns, .. }) => {
            let cols: Vec<String> = columns.iter().map(|c| ident(c)).collect();
            out.push_str(&format!("\nGROUP BY {}", cols.join(", ")));
        }
        Some(PlanNode::LroCluster {
            requirement,
            variant,
            ..
        }) => {
            out.push_str(&format!(
                "\nGROUP BY LLM_CLUSTER('row', {}{})",
                quote_str(requirement),
                using(variant)
            ));
        }
        _ => {}
    }
    match q.order {
        Some(PlanNode::OrderBy {
            column, descending, ..
        }) => {
            out.push_str(&format!(
                "\nORDER BY {} {}",
                ident(column),
                if *descending { "DESC" } else { "ASC" }
            ));
        }
        Some(PlanNode::LroOrder {
            requirement,
            variant,
            ..
        }) => {
            out.push_str(&format!(
                "\nORDER BY LLM_ORDER('row', {}{})",
                quote_str(requirement),
                using(variant)
            ));
        }
        _ => {}
    }
    if let Some(n) = q.limit {
        out.push_str(&format!("\nLIMIT {n}"));
    }
    out.push(';');
    out
}
