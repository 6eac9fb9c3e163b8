//! Concrete syntax tree queries over Python source, backed by tree-sitter.

use std::collections::BTreeSet;
use std::ops::Range;

use tree_sitter::{Node, Parser, Tree};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("syntax error at line {line}, column {column}")]
pub struct SyntaxError {
    /// 1-based.
    pub line: usize,
    /// 0-based byte column.
    pub column: usize,
}

pub fn parse(src: &str) -> Tree {
    let mut parser = Parser::new();
    parser
        .set_language(&tree_sitter_python::LANGUAGE.into())
        .expect("bundled python grammar is ABI compatible");
    parser.parse(src, None).expect("parser has a language and no timeout")
}

/// Parses and rejects sources whose tree contains error or missing nodes.
pub fn parse_checked(src: &str) -> Result<Tree, SyntaxError> {
    let tree = parse(src);
    if let Some(bad) = first_error(tree.root_node()) {
        let pos = bad.start_position();
        return Err(SyntaxError { line: pos.row + 1, column: pos.column });
    }
    Ok(tree)
}

fn first_error(node: Node<'_>) -> Option<Node<'_>> {
    if !node.has_error() {
        return None;
    }
    if node.is_error() || node.is_missing() {
        return Some(node);
    }
    let mut cursor = node.walk();
    let children: Vec<_> = node.children(&mut cursor).collect();
    children.into_iter().find_map(first_error).or(Some(node))
}

/// Maximum node depth of the concrete syntax tree, root = 1. Anonymous
/// nodes (keywords, punctuation) count.
pub fn tree_depth(tree: &Tree) -> usize {
    // Iterative walk; deeply nested sources would overflow recursion.
    let mut cursor = tree.walk();
    let mut depth = 1;
    let mut max = 1;
    loop {
        if cursor.goto_first_child() {
            depth += 1;
            max = max.max(depth);
            continue;
        }
        loop {
            if cursor.goto_next_sibling() {
                break;
            }
            if !cursor.goto_parent() {
                return max;
            }
            depth -= 1;
        }
    }
}

/// Location of a function definition in its source file. All ranges are
/// byte offsets into the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionSite {
    pub name: String,
    /// Start of the line holding `def` (or `async def`).
    pub header_start: usize,
    /// One past the newline ending the header's last line.
    pub header_end: usize,
    pub docstring: Option<Range<usize>>,
    /// Full lines of the body after the docstring, including the trailing
    /// newline if present. Empty when the body is only a docstring.
    pub body: Range<usize>,
    /// Indentation of the body statements.
    pub body_indent: String,
    /// Names of enclosing classes, outermost first.
    pub enclosing_classes: Vec<String>,
}

impl FunctionSite {
    pub fn qualified_name(&self) -> String {
        let mut parts = self.enclosing_classes.clone();
        parts.push(self.name.clone());
        parts.join(".")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SiteError {
    #[error("function `{0}` is not defined")]
    NotFound(String),
    #[error("function `{0}` has its body on the header line")]
    InlineBody(String),
}

/// Finds the first definition (in document order) of a function or method
/// called `name`.
pub fn find_function(src: &str, tree: &Tree, name: &str) -> Result<FunctionSite, SiteError> {
    let def = definitions(src, tree, name).into_iter().next().ok_or_else(|| SiteError::NotFound(name.to_string()))?;
    site_of(src, def, name)
}

/// Like [`find_function`] but prefers the definition whose dotted class path
/// equals `qualified` (`Class.method`); falls back to the first definition
/// of the last path component.
pub fn find_function_qualified(src: &str, tree: &Tree, qualified: &str) -> Result<FunctionSite, SiteError> {
    let name = qualified.rsplit('.').next().unwrap_or(qualified);
    for def in definitions(src, tree, name) {
        if let Ok(site) = site_of(src, def, name) {
            if site.qualified_name() == qualified {
                return Ok(site);
            }
        }
    }
    find_function(src, tree, name)
}

fn definitions<'t>(src: &str, tree: &'t Tree, name: &str) -> Vec<Node<'t>> {
    let mut found = Vec::new();
    visit(tree.root_node(), &mut |node| {
        if node.kind() == "function_definition"
            && node.child_by_field_name("name").map(|n| &src[n.byte_range()]) == Some(name)
        {
            found.push(node);
        }
    });
    found
}

fn site_of(src: &str, def: Node, name: &str) -> Result<FunctionSite, SiteError> {
    let body = def.child_by_field_name("body").ok_or_else(|| SiteError::NotFound(name.to_string()))?;

    let colon_row = {
        let mut cursor = def.walk();
        def.children(&mut cursor)
            .filter(|c| c.kind() == ":")
            .map(|c| c.end_position().row)
            .last()
            .unwrap_or(def.start_position().row)
    };
    if body.start_position().row == colon_row {
        return Err(SiteError::InlineBody(name.to_string()));
    }

    let header_start = line_start(src, def.start_byte());
    let header_end = line_end_inclusive(src, line_start_of_row(src, colon_row));

    let mut cursor = body.walk();
    let statements: Vec<Node> = body.named_children(&mut cursor).filter(|n| n.kind() != "comment").collect();
    let docstring = statements.first().filter(|s| is_docstring(s)).map(|s| s.byte_range());
    let first_code = statements.iter().find(|s| docstring.as_ref() != Some(&s.byte_range()));
    let body_end = line_end_inclusive(src, body.end_byte().saturating_sub(1).max(body.start_byte()));
    let body_range = match (first_code, &docstring) {
        (Some(stmt), _) => line_start(src, stmt.start_byte())..body_end,
        (None, Some(doc)) => {
            let end = line_end_inclusive(src, doc.end.saturating_sub(1));
            end..end
        }
        (None, None) => body_end..body_end,
    };
    let indent_at = first_code.or(statements.first()).map_or(body.start_byte(), |s| s.start_byte());
    let body_indent = src[line_start(src, indent_at)..indent_at].to_string();

    let mut enclosing_classes = Vec::new();
    let mut parent = def.parent();
    while let Some(p) = parent {
        if p.kind() == "class_definition" {
            if let Some(n) = p.child_by_field_name("name") {
                enclosing_classes.push(src[n.byte_range()].to_string());
            }
        }
        parent = p.parent();
    }
    enclosing_classes.reverse();

    Ok(FunctionSite {
        name: name.to_string(),
        header_start,
        header_end,
        docstring,
        body: body_range,
        body_indent,
        enclosing_classes,
    })
}

fn is_docstring(stmt: &Node) -> bool {
    stmt.kind() == "expression_statement"
        && stmt.named_child_count() == 1
        && stmt.named_child(0).is_some_and(|c| c.kind() == "string" || c.kind() == "concatenated_string")
}

fn line_start(src: &str, at: usize) -> usize {
    src[..at].rfind('\n').map_or(0, |i| i + 1)
}

fn line_start_of_row(src: &str, row: usize) -> usize {
    if row == 0 {
        return 0;
    }
    src.match_indices('\n').nth(row - 1).map_or(src.len(), |(i, _)| i + 1)
}

/// Offset one past the newline ending the line containing `at`.
fn line_end_inclusive(src: &str, at: usize) -> usize {
    src[at..].find('\n').map_or(src.len(), |i| at + i + 1)
}

pub(crate) fn visit<'t>(node: Node<'t>, f: &mut impl FnMut(Node<'t>)) {
    let mut cursor = node.walk();
    let mut stack = vec![node];
    while let Some(n) = stack.pop() {
        f(n);
        let children: Vec<_> = n.children(&mut cursor).collect();
        stack.extend(children.into_iter().rev());
    }
}

/// Number of `assert` statements anywhere in the source.
pub fn count_asserts(tree: &Tree) -> usize {
    let mut count = 0;
    visit(tree.root_node(), &mut |n| {
        if n.kind() == "assert_statement" {
            count += 1;
        }
    });
    count
}

/// Whether any call expression invokes `name`, either as a bare name or as
/// an attribute (`obj.name(...)`).
pub fn calls_function(src: &str, tree: &Tree, name: &str) -> bool {
    let mut hit = false;
    visit(tree.root_node(), &mut |n| {
        if hit || n.kind() != "call" {
            return;
        }
        if let Some(func) = n.child_by_field_name("function") {
            let callee = match func.kind() {
                "identifier" => Some(func),
                "attribute" => func.child_by_field_name("attribute"),
                _ => None,
            };
            hit = callee.is_some_and(|c| &src[c.byte_range()] == name);
        }
    });
    hit
}

/// Number of call expressions fully inside `span`.
pub fn count_calls(tree: &Tree, span: &Range<usize>) -> usize {
    let mut count = 0;
    visit(tree.root_node(), &mut |n| {
        if n.kind() == "call" && n.start_byte() >= span.start && n.end_byte() <= span.end {
            count += 1;
        }
    });
    count
}

/// Identifiers bound inside `span`: parameters (including lambda
/// parameters), assignment and augmented-assignment targets, walrus
/// targets, `for` targets (statements and comprehensions) and `with ... as`
/// targets. Attribute and subscript targets bind no new name and are
/// ignored.
pub fn bound_variables(src: &str, tree: &Tree, span: &Range<usize>) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let inside = |n: &Node| n.start_byte() >= span.start && n.end_byte() <= span.end;
    visit(tree.root_node(), &mut |n| {
        let targets: Vec<Node> = match n.kind() {
            "parameters" | "lambda_parameters" => {
                let mut cursor = n.walk();
                n.named_children(&mut cursor).filter_map(parameter_name).collect()
            }
            "assignment" | "augmented_assignment" => n.child_by_field_name("left").into_iter().collect(),
            "named_expression" => n.child_by_field_name("name").into_iter().collect(),
            "for_statement" | "for_in_clause" => n.child_by_field_name("left").into_iter().collect(),
            "as_pattern" if n.parent().is_some_and(|p| p.kind() == "with_item") => {
                n.child_by_field_name("alias").into_iter().collect()
            }
            _ => Vec::new(),
        };
        for t in targets {
            collect_target_names(src, t, &mut |ident| {
                if inside(&ident) {
                    out.insert(src[ident.byte_range()].to_string());
                }
            });
        }
    });
    out
}

fn parameter_name(param: Node) -> Option<Node> {
    match param.kind() {
        "identifier" => Some(param),
        "default_parameter" | "typed_default_parameter" => param.child_by_field_name("name"),
        "typed_parameter" | "list_splat_pattern" | "dictionary_splat_pattern" => {
            let mut cursor = param.walk();
            let first = param.named_children(&mut cursor).next();
            first.and_then(|c| if c.kind() == "identifier" { Some(c) } else { parameter_name(c) })
        }
        _ => None,
    }
}

fn collect_target_names<'t>(src: &str, node: Node<'t>, f: &mut impl FnMut(Node<'t>)) {
    match node.kind() {
        "identifier" => f(node),
        "pattern_list" | "tuple_pattern" | "list_pattern" | "tuple" | "list" | "list_splat_pattern"
        | "list_splat" | "parenthesized_expression" | "as_pattern_target" => {
            let mut cursor = node.walk();
            let children: Vec<_> = node.named_children(&mut cursor).collect();
            for c in children {
                collect_target_names(src, c, f);
            }
        }
        _ => {}
    }
}

/// Top-level module names imported anywhere in the source. Relative imports
/// are skipped since they refer to the example's own package.
pub fn imported_modules(src: &str, tree: &Tree) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let top = |dotted: &str| dotted.split('.').next().unwrap_or(dotted).trim().to_string();
    visit(tree.root_node(), &mut |n| match n.kind() {
        "import_statement" => {
            let mut cursor = n.walk();
            for name in n.children_by_field_name("name", &mut cursor) {
                let dotted = if name.kind() == "aliased_import" {
                    name.child_by_field_name("name").map(|d| &src[d.byte_range()])
                } else {
                    Some(&src[name.byte_range()])
                };
                if let Some(d) = dotted {
                    out.insert(top(d));
                }
            }
        }
        "import_from_statement" | "future_import_statement" => {
            if n.kind() == "future_import_statement" {
                out.insert("__future__".to_string());
            } else if let Some(module) = n.child_by_field_name("module_name") {
                if module.kind() == "dotted_name" {
                    out.insert(top(&src[module.byte_range()]));
                }
            }
        }
        _ => {}
    });
    out
}
