#pragma once

#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "relcbm/error.hpp"
#include "relcbm/logic.hpp"

namespace relcbm {

enum class ViolationKind {
  kUnknownPredicate,
  kArityMismatch,
  kDuplicateHeadVariable,
  kEmptyBody,
  kNonConceptBody,
  kNonTaskHead,
  kUndeclaredVariable,
  kBadGuard,
};

inline const char* to_string(ViolationKind v) {
  switch (v) {
    case ViolationKind::kUnknownPredicate: return "UnknownPredicate";
    case ViolationKind::kArityMismatch: return "ArityMismatch";
    case ViolationKind::kDuplicateHeadVariable: return "DuplicateHeadVariable";
    case ViolationKind::kEmptyBody: return "EmptyBody";
    case ViolationKind::kNonConceptBody: return "NonConceptBody";
    case ViolationKind::kNonTaskHead: return "NonTaskHead";
    case ViolationKind::kUndeclaredVariable: return "UndeclaredVariable";
    case ViolationKind::kBadGuard: return "BadGuard";
  }
  return "?";
}

struct Violation {
  ViolationKind kind;
  std::string detail;
};

namespace detail {

inline bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

inline void check_atom(const Atom& a, const Schema& schema, PredicateKind expected,
                       std::vector<Violation>& out) {
  const PredicateSig* sig = schema.find_any(a.predicate, expected);
  if (!sig) {
    out.push_back({ViolationKind::kUnknownPredicate, a.predicate});
    return;
  }
  if (sig->kind != expected) {
    if (expected == PredicateKind::kConcept) {
      out.push_back({ViolationKind::kNonConceptBody, a.predicate});
    } else if (expected == PredicateKind::kTask) {
      out.push_back({ViolationKind::kNonTaskHead, a.predicate});
    } else {
      out.push_back({ViolationKind::kBadGuard, a.predicate + " is not a relation"});
    }
  }
  if (static_cast<std::size_t>(sig->arity) != a.args.size()) {
    out.push_back({ViolationKind::kArityMismatch,
                   a.predicate + "/" + std::to_string(sig->arity) + " given " +
                       std::to_string(a.args.size()) + " arguments"});
  }
}

}  // namespace detail

/// All violated template invariants; empty iff the template is valid.
inline std::vector<Violation> validate_template(const Template& t, const Schema& schema) {
  std::vector<Violation> out;
  detail::check_atom(t.head, schema, PredicateKind::kTask, out);

  for (std::size_t i = 0; i < t.head_vars.size(); ++i) {
    for (std::size_t j = i + 1; j < t.head_vars.size(); ++j) {
      if (t.head_vars[i] == t.head_vars[j]) {
        out.push_back({ViolationKind::kDuplicateHeadVariable, t.head_vars[i]});
      }
    }
  }
  if (t.head.args.size() != t.head_vars.size()) {
    out.push_back({ViolationKind::kUndeclaredVariable, "head variables do not match head atom"});
  }
  if (t.body.empty()) out.push_back({ViolationKind::kEmptyBody, to_string(t.head)});

  auto declared = [&](const std::string& v) {
    return detail::contains(t.head_vars, v) || detail::contains(t.extra_vars, v);
  };
  for (const auto& a : t.body) {
    detail::check_atom(a, schema, PredicateKind::kConcept, out);
    for (const auto& term : a.args) {
      if (term.is_var() && !declared(term.name)) {
        out.push_back({ViolationKind::kUndeclaredVariable, term.name});
      }
    }
  }
  for (const auto& m : t.guard.memberships) {
    detail::check_atom(m, schema, PredicateKind::kRelation, out);
    for (const auto& term : m.args) {
      if (term.is_var() && !declared(term.name)) {
        out.push_back({ViolationKind::kBadGuard, "guard variable " + term.name + " not in template"});
      }
    }
  }
  return out;
}

namespace detail {

struct Token {
  enum class Kind { kIdent, kLParen, kRParen, kComma, kNeck, kDot, kLBracket, kRBracket, kEnd };
  Kind kind;
  std::string text;
  std::size_t pos;
};

class Lexer {
 public:
  explicit Lexer(std::string_view text) : text_(text) {}

  std::vector<Token> run() {
    std::vector<Token> toks;
    while (true) {
      skip_space();
      if (i_ >= text_.size()) {
        toks.push_back({Token::Kind::kEnd, "<end>", i_});
        return toks;
      }
      const char c = text_[i_];
      const std::size_t start = i_;
      if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
        while (i_ < text_.size() &&
               (std::isalnum(static_cast<unsigned char>(text_[i_])) || text_[i_] == '_')) {
          ++i_;
        }
        toks.push_back({Token::Kind::kIdent, std::string(text_.substr(start, i_ - start)), start});
        continue;
      }
      if (c == ':' && i_ + 1 < text_.size() && text_[i_ + 1] == '-') {
        i_ += 2;
        toks.push_back({Token::Kind::kNeck, ":-", start});
        continue;
      }
      ++i_;
      switch (c) {
        case '(': toks.push_back({Token::Kind::kLParen, "(", start}); break;
        case ')': toks.push_back({Token::Kind::kRParen, ")", start}); break;
        case ',': toks.push_back({Token::Kind::kComma, ",", start}); break;
        case '.': toks.push_back({Token::Kind::kDot, ".", start}); break;
        case '[': toks.push_back({Token::Kind::kLBracket, "[", start}); break;
        case ']': toks.push_back({Token::Kind::kRBracket, "]", start}); break;
        default:
          throw Error(ErrorCode::kParseError,
                      "unexpected character '" + std::string(1, c) + "' at position " + std::to_string(start));
      }
    }
  }

 private:
  void skip_space() {
    while (i_ < text_.size()) {
      if (std::isspace(static_cast<unsigned char>(text_[i_]))) {
        ++i_;
      } else if (text_[i_] == '#') {
        while (i_ < text_.size() && text_[i_] != '\n') ++i_;
      } else {
        break;
      }
    }
  }

  std::string_view text_;
  std::size_t i_ = 0;
};

class Parser {
 public:
  Parser(std::vector<Token> toks, const Schema& schema) : toks_(std::move(toks)), schema_(schema) {}

  Template parse() {
    Template t;
    std::size_t head_pos = peek().pos;
    t.head = atom();
    for (const auto& a : t.head.args) {
      if (detail::contains(t.head_vars, a.name)) {
        throw Error(ErrorCode::kDuplicateHeadVariable,
                    "'" + a.name + "' repeated in head at position " + std::to_string(head_pos));
      }
      t.head_vars.push_back(a.name);
    }
    lookup(t.head, PredicateKind::kTask, head_pos);
    expect(Token::Kind::kNeck, ":-");
    if (peek().kind == Token::Kind::kDot || peek().kind == Token::Kind::kLBracket) {
      throw Error(ErrorCode::kEmptyBody, "no body atoms at position " + std::to_string(peek().pos));
    }
    while (true) {
      std::size_t pos = peek().pos;
      Atom a = atom();
      lookup(a, PredicateKind::kConcept, pos);
      for (const auto& term : a.args) {
        if (!detail::contains(t.head_vars, term.name) && !detail::contains(t.extra_vars, term.name)) {
          t.extra_vars.push_back(term.name);
        }
      }
      t.body.push_back(std::move(a));
      if (peek().kind != Token::Kind::kComma) break;
      next();
    }
    if (peek().kind == Token::Kind::kLBracket) {
      next();
      while (true) {
        std::size_t pos = peek().pos;
        if (peek().kind == Token::Kind::kIdent && peek().text == "distinct" &&
            toks_[i_ + 1].kind != Token::Kind::kLParen) {
          next();
          t.guard.distinct = true;
        } else {
          Atom m = atom();
          lookup(m, PredicateKind::kRelation, pos);
          for (const auto& term : m.args) {
            if (!detail::contains(t.head_vars, term.name) && !detail::contains(t.extra_vars, term.name)) {
              throw Error(ErrorCode::kUnboundVariable, "guard variable '" + term.name +
                                                           "' does not occur in the template at position " +
                                                           std::to_string(pos));
            }
          }
          t.guard.memberships.push_back(std::move(m));
        }
        if (peek().kind != Token::Kind::kComma) break;
        next();
      }
      expect(Token::Kind::kRBracket, "]");
    }
    expect(Token::Kind::kDot, ".");
    if (peek().kind != Token::Kind::kEnd) {
      throw Error(ErrorCode::kParseError, "trailing input '" + peek().text + "' at position " +
                                              std::to_string(peek().pos));
    }
    return t;
  }

 private:
  const Token& peek() const { return toks_[i_]; }
  const Token& next() { return toks_[i_ < toks_.size() - 1 ? i_++ : i_]; }

  void expect(Token::Kind kind, const char* what) {
    if (peek().kind != kind) {
      throw Error(ErrorCode::kParseError, std::string("expected '") + what + "' but found '" + peek().text +
                                              "' at position " + std::to_string(peek().pos));
    }
    next();
  }

  Atom atom() {
    if (peek().kind != Token::Kind::kIdent) {
      throw Error(ErrorCode::kParseError, "expected predicate name but found '" + peek().text +
                                              "' at position " + std::to_string(peek().pos));
    }
    Atom a{next().text, {}};
    expect(Token::Kind::kLParen, "(");
    while (true) {
      if (peek().kind != Token::Kind::kIdent) {
        throw Error(ErrorCode::kParseError, "expected variable but found '" + peek().text +
                                                "' at position " + std::to_string(peek().pos));
      }
      a.args.push_back(Term::var(next().text));
      if (peek().kind != Token::Kind::kComma) break;
      next();
    }
    expect(Token::Kind::kRParen, ")");
    return a;
  }

  void lookup(const Atom& a, PredicateKind kind, std::size_t pos) const {
    const PredicateSig* sig = schema_.find_any(a.predicate, kind);
    if (!sig) {
      throw Error(ErrorCode::kUnknownPredicate, "'" + a.predicate + "' at position " + std::to_string(pos));
    }
    if (sig->kind != kind) {
      const auto code = kind == PredicateKind::kConcept ? ErrorCode::kNonConceptBody : ErrorCode::kSchemaMismatch;
      throw Error(code, "'" + a.predicate + "' is a " + to_string(sig->kind) + " predicate, expected " +
                            to_string(kind) + " at position " + std::to_string(pos));
    }
    if (static_cast<std::size_t>(sig->arity) != a.args.size()) {
      throw Error(ErrorCode::kArityMismatch, "'" + a.predicate + "' expects " + std::to_string(sig->arity) +
                                                 " arguments, got " + std::to_string(a.args.size()) +
                                                 " at position " + std::to_string(pos));
    }
  }

  std::vector<Token> toks_;
  std::size_t i_ = 0;
  const Schema& schema_;
};

}  // namespace detail

/// Parses `head :- atom, ..., atom [guards].` against a schema.
/// Head variables become v̄; other variables become ū in first-appearance order.
inline Template parse_template(std::string_view text, const Schema& schema) {
  detail::Lexer lexer(text);
  detail::Parser parser(lexer.run(), schema);
  return parser.parse();
}

/// One template per non-blank, non-comment line.
inline std::vector<Template> parse_template_file(std::istream& in, const Schema& schema) {
  std::vector<Template> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    std::string body = hash == std::string::npos ? line : line.substr(0, hash);
    if (body.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_template(body, schema));
    } catch (const Error& e) {
      throw Error(e.code(), "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<Template> load_templates(const std::string& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open template file " + path);
  return parse_template_file(in, schema);
}

}  // namespace relcbm
