"""
LP file support
Writes MilpModel objects in CPLEX-style LP text and reads the same
subset back, together with "name value" solution files produced by
external solvers

Grammar subset:
    \\ comment lines ("\\ objective constant: <value>" is honoured)
    Minimize        one "obj: <expression>" line, quadratic part written as
                    "+ [ 2q x ^ 2 ] / 2"
    Subject To      one "<name>: <expression> <=|>=|= <rhs>" per line
    Bounds          "l <= x <= u", "x >= l", "x <= u", "x = v", "x free"
    Binary          one name per line
    Generals        one name per line
    End
"""

import logging
import math
import re

from stochlot.milpmodel import EQ, GE, LE, MilpModel, VariableRef

logger = logging.getLogger(__name__)

_TOKEN = re.compile(r'\s*(<=|>=|=<|=>|<|>|=|\[|\]|\^|/|\+|-|'
                    r'(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|'
                    r'[A-Za-z_][A-Za-z0-9_.]*)')
_SENSES = {'<=': LE, '=<': LE, '<': LE, '>=': GE, '=>': GE, '>': GE, '=': EQ}
_SECTIONS = {
    'minimize': 'objective', 'minimise': 'objective', 'min': 'objective',
    'subject to': 'rows', 'such that': 'rows', 'st': 'rows', 's.t.': 'rows',
    'bounds': 'bounds', 'bound': 'bounds',
    'binary': 'binary', 'binaries': 'binary', 'bin': 'binary',
    'generals': 'general', 'general': 'general', 'integers': 'general',
    'end': 'end',
}
_INFINITY = ('inf', 'infinity')


class LpFormatError(Exception):
    """Malformed LP or solution file, message carries the line number."""


class SolutionImportError(LpFormatError):
    """Solution file does not match the model."""


def _number(value):
    return '%.17g' % value


def _expression(terms, names):
    """terms: [(column, coefficient)]"""

    parts = []
    for col, coef in terms:
        sign = '-' if coef < 0 else '+'
        text = '{} {}'.format(_number(abs(coef)), names[col])
        if not parts:
            parts.append(text if sign == '+' else '- ' + text)
        else:
            parts.append('{} {}'.format(sign, text))
    if not parts and names:
        parts.append('0 {}'.format(names[0]))
    return ' '.join(parts)


def writeLpFile(model, path):
    """Writes the model, coefficients with 17 significant digits."""

    names = [ref.name for ref in model.variables]
    lines = ['\\ {}'.format(model.name)]
    if model.objective_constant != 0.0:
        lines.append('\\ objective constant: {}'.format(
            _number(model.objective_constant)))
    lines.append('Minimize')
    objective = ' obj: ' + _expression(sorted(model.objective.items()), names)
    if model.quadratic:
        squares = ' + '.join('{} {} ^ 2'.format(_number(2.0 * q), names[col])
                             for col, q in sorted(model.quadratic.items()))
        objective += ' + [ {} ] / 2'.format(squares)
    lines.append(objective)
    lines.append('Subject To')
    for name, (cols, coefs, sense, rhs) in zip(model.row_names, model.rows):
        lines.append(' {}: {} {} {}'.format(
            name, _expression(zip(cols, coefs), names), sense, _number(rhs)))
    lines.append('Bounds')
    for name, lower, upper in zip(names, model.lower, model.upper):
        if math.isinf(lower) and math.isinf(upper):
            lines.append(' {} free'.format(name))
        elif math.isinf(upper):
            lines.append(' {} >= {}'.format(name, _number(lower)))
        elif math.isinf(lower):
            lines.append(' -inf <= {} <= {}'.format(name, _number(upper)))
        else:
            lines.append(' {} <= {} <= {}'.format(_number(lower), name,
                                                   _number(upper)))
    binaries = [name for name, integer, lower, upper in zip(
        names, model.integer, model.lower, model.upper)
        if integer and lower >= 0 and upper <= 1]
    generals = [name for name, integer in zip(names, model.integer)
                if integer and name not in set(binaries)]
    if binaries:
        lines.append('Binary')
        lines.extend(' ' + name for name in binaries)
    if generals:
        lines.append('Generals')
        lines.extend(' ' + name for name in generals)
    lines.append('End')
    with open(str(path), 'w') as lp_file:
        lp_file.write('\n'.join(lines) + '\n')


def _tokenize(text, lineno):
    tokens = []
    position = 0
    text = text.rstrip()
    while position < len(text):
        match = _TOKEN.match(text, position)
        if match is None or match.end() == position:
            raise LpFormatError('line {}: cannot parse {!r}'.format(
                lineno, text[position:].strip()))
        tokens.append(match.group(1))
        position = match.end()
    return tokens


def _isNumber(token):
    return token[0].isdigit() or token[0] == '.'


def _parseExpression(tokens, lineno):
    """Returns (linear {name: coef}, quadratic {name: coef}, constant)."""

    linear, quadratic = {}, {}
    constant = 0.0
    sign, coef = 1.0, None
    position = 0
    while position < len(tokens):
        token = tokens[position]
        position += 1
        if token == '+':
            continue
        if token == '-':
            sign = -sign
        elif _isNumber(token):
            if coef is not None:
                raise LpFormatError('line {}: two numbers in a row'.format(
                    lineno))
            coef = float(token)
        elif token == '[':
            try:
                close = tokens.index(']', position)
            except ValueError:
                raise LpFormatError('line {}: unclosed ['.format(lineno))
            if tokens[close + 1:close + 3] != ['/', '2']:
                raise LpFormatError('line {}: quadratic part must end with '
                                    '"] / 2"'.format(lineno))
            inner, _, inner_constant = _parseExpression(
                [t for t in tokens[position:close] if t not in ('^',)], lineno)
            if inner_constant:
                raise LpFormatError('line {}: constant inside quadratic part'
                                    .format(lineno))
            for name, value in inner.items():
                quadratic[name] = quadratic.get(name, 0.0) + sign * value / 2.0
            position = close + 3
            sign, coef = 1.0, None
        elif token[0].isalpha() or token[0] == '_':
            value = sign * (1.0 if coef is None else coef)
            linear[token] = linear.get(token, 0.0) + value
            sign, coef = 1.0, None
        else:
            raise LpFormatError('line {}: unexpected {!r}'.format(lineno, token))
    if coef is not None:
        constant += sign * coef
    return linear, quadratic, constant


def _stripSquares(tokens):
    """Removes the '2' exponent following '^' inside quadratic brackets."""

    cleaned = []
    skip = False
    for token in tokens:
        if skip:
            skip = False
            if token != '2':
                raise LpFormatError('only squared terms are supported')
            continue
        if token == '^':
            skip = True
        cleaned.append(token)
    return cleaned


def _parseValue(tokens, position, lineno):
    """Reads [sign] number|inf, returns (value, next position)."""

    sign = 1.0
    while position < len(tokens) and tokens[position] in ('+', '-'):
        if tokens[position] == '-':
            sign = -sign
        position += 1
    if position >= len(tokens):
        raise LpFormatError('line {}: missing value'.format(lineno))
    token = tokens[position]
    if token.lower() in _INFINITY:
        return sign * math.inf, position + 1
    if not _isNumber(token):
        raise LpFormatError('line {}: expected a number, got {!r}'.format(
            lineno, token))
    return sign * float(token), position + 1


def _parseBound(tokens, lineno, bounds):
    if len(tokens) == 2 and tokens[1].lower() == 'free':
        bounds[tokens[0]] = (-math.inf, math.inf)
        return
    if ((tokens[0][0].isalpha() or tokens[0][0] == '_') and
            tokens[0].lower() not in _INFINITY):
        name = tokens[0]
        if len(tokens) < 3 or tokens[1] not in _SENSES:
            raise LpFormatError('line {}: malformed bound'.format(lineno))
        value, end = _parseValue(tokens, 2, lineno)
        if end != len(tokens):
            raise LpFormatError('line {}: malformed bound'.format(lineno))
        lower, upper = bounds.get(name, (0.0, math.inf))
        sense = _SENSES[tokens[1]]
        if sense == LE:
            upper = value
        elif sense == GE:
            lower = value
        else:
            lower = upper = value
        bounds[name] = (lower, upper)
        return
    value, position = _parseValue(tokens, 0, lineno)
    if position + 1 >= len(tokens) or _SENSES.get(tokens[position]) != LE:
        raise LpFormatError('line {}: malformed bound'.format(lineno))
    name = tokens[position + 1]
    lower, upper = value, bounds.get(name, (0.0, math.inf))[1]
    position += 2
    if position < len(tokens):
        if _SENSES.get(tokens[position]) != LE:
            raise LpFormatError('line {}: malformed bound'.format(lineno))
        upper, position = _parseValue(tokens, position + 1, lineno)
    if position != len(tokens):
        raise LpFormatError('line {}: malformed bound'.format(lineno))
    bounds[name] = (lower, upper)


def readLpFile(path):
    """Parses an LP file of the supported subset into a MilpModel."""

    try:
        with open(str(path), 'r') as lp_file:
            raw = lp_file.read().splitlines()
    except OSError as ex:
        raise LpFormatError('cannot open LP file {}: {}'.format(
            path, ex.strerror))

    section = None
    name = 'lpfile'
    constant = 0.0
    objective = []
    rows = []
    bounds = {}
    binaries, generals = [], []
    for lineno, line in enumerate(raw, 1):
        text = line.strip()
        if not text:
            continue
        if text.startswith('\\'):
            match = re.match(r'\\\s*objective constant:\s*(\S+)', text)
            if match:
                constant = float(match.group(1))
            elif lineno == 1:
                name = text.lstrip('\\').strip() or name
            continue
        key = ' '.join(text.lower().split())
        if key in _SECTIONS:
            section = _SECTIONS[key]
            continue
        if key in ('maximize', 'maximise', 'max'):
            raise LpFormatError('line {}: only minimization is supported'
                                .format(lineno))
        if section == 'objective':
            objective.append((lineno, text.split(':', 1)[-1]))
        elif section == 'rows':
            rows.append((lineno, text))
        elif section == 'bounds':
            _parseBound(_tokenize(text, lineno), lineno, bounds)
        elif section == 'binary':
            binaries.extend(text.split())
        elif section == 'general':
            generals.extend(text.split())
        else:
            raise LpFormatError('line {}: text outside of a section'.format(
                lineno))

    linear, quadratic = {}, {}
    for lineno, text in objective:
        part_linear, part_quadratic, part_constant = _parseExpression(
            _stripSquares(_tokenize(text, lineno)), lineno)
        for key, value in part_linear.items():
            linear[key] = linear.get(key, 0.0) + value
        for key, value in part_quadratic.items():
            quadratic[key] = quadratic.get(key, 0.0) + value
        constant += part_constant

    parsed_rows = []
    for lineno, text in rows:
        label, _, body = text.rpartition(':')
        tokens = _tokenize(body, lineno)
        senses = [k for k, token in enumerate(tokens) if token in _SENSES]
        if len(senses) != 1:
            raise LpFormatError('line {}: constraint needs exactly one sense'
                                .format(lineno))
        split = senses[0]
        terms, _, lhs_constant = _parseExpression(tokens[:split], lineno)
        rhs, end = _parseValue(tokens, split + 1, lineno)
        if end != len(tokens):
            raise LpFormatError('line {}: trailing text after rhs'.format(
                lineno))
        parsed_rows.append((label.strip() or None, terms,
                            _SENSES[tokens[split]], rhs - lhs_constant))

    order = list(bounds)
    seen = set(order)
    for names in [linear, quadratic] + [terms for _, terms, _, _ in
                                        parsed_rows] + [binaries, generals]:
        for key in names:
            if key not in seen:
                seen.add(key)
                order.append(key)

    model = MilpModel(name)
    integers = set(binaries) | set(generals)
    for key in order:
        lower, upper = bounds.get(key, (0.0, 1.0 if key in binaries
                                        else math.inf))
        model.addVariable(VariableRef.fromName(key), lower, upper,
                          integer=key in integers)
    refs = {ref.name: ref for ref in model.variables}
    for key, value in linear.items():
        model.addObjective(refs[key], value)
    for key, value in quadratic.items():
        model.addQuadratic(refs[key], value)
    model.objective_constant = constant
    for label, terms, sense, rhs in parsed_rows:
        model.addConstraint([(refs[key], value) for key, value in
                             terms.items()], sense, rhs, label)
    return model


def readSolution(model, path):
    """Reads "name value" or "name=value" lines into {VariableRef: value}.

    Blank lines and lines starting with '#' are skipped.
    """

    refs = {ref.name: ref for ref in model.variables}
    values = {}
    try:
        with open(str(path), 'r') as solution_file:
            lines = solution_file.read().splitlines()
    except OSError as ex:
        raise SolutionImportError('cannot open solution file {}: {}'.format(
            path, ex.strerror))
    for lineno, line in enumerate(lines, 1):
        text = line.strip()
        if not text or text.startswith('#'):
            continue
        parts = text.split('=', 1) if '=' in text else text.split()
        if len(parts) != 2:
            raise SolutionImportError('line {}: malformed line {!r}'.format(
                lineno, text))
        name, value = parts[0].strip(), parts[1].strip()
        if name not in refs:
            raise SolutionImportError('line {}: unknown variable {!r}'.format(
                lineno, name))
        try:
            values[refs[name]] = float(value)
        except ValueError:
            raise SolutionImportError('line {}: malformed value {!r}'.format(
                lineno, value))
    return values


def writeSolution(values, path):
    """Writes {VariableRef: value} as "name value" lines."""

    with open(str(path), 'w') as solution_file:
        for ref, value in values.items():
            solution_file.write('{} {}\n'.format(ref.name, _number(value)))
