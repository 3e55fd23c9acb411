import os
import sys


class Colors:
    HEADER = '\033[95m'
    BLUE = '\033[94m'
    GREEN = '\033[92m'
    FAIL = '\033[91m'
    ENDC = '\033[0m'
    BOLD = '\033[1m'
    CYAN = '\033[96m'
    RED = '\033[91m'
    YELLOW = '\033[93m'


def colors_enabled(stream=None) -> bool:
    """Colors are off when NO_COLOR is set or the stream is not a terminal"""
    if os.getenv('NO_COLOR'):
        return False
    stream = stream or sys.stdout
    return hasattr(stream, 'isatty') and stream.isatty()


def colorize(text: str, color: str, stream=None) -> str:
    """Wrap text with color code and end code"""
    if not colors_enabled(stream):
        return text
    return f"{color}{text}{Colors.ENDC}"


def bold(text: str) -> str:
    return colorize(text, Colors.BOLD)


def print_success(msg):
    print(colorize(msg, Colors.GREEN))


def print_error(msg):
    print(colorize(msg, Colors.RED, sys.stderr), file=sys.stderr)


def print_info(msg):
    print(colorize(msg, Colors.BLUE))


def print_warning(msg):
    print(colorize(msg, Colors.YELLOW, sys.stderr), file=sys.stderr)


def print_header(msg):
    print(colorize(msg, Colors.BOLD + Colors.CYAN))


def format_table(columns, rows) -> str:
    """Render rows as a pipe-delimited table with padded columns"""
    cells = [[str(c) for c in columns]] + [[str(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = []
    for n, row in enumerate(cells):
        lines.append('| ' + ' | '.join(v.ljust(w) for v, w in zip(row, widths)) + ' |')
        if n == 0:
            lines.append('|' + '|'.join('-' * (w + 2) for w in widths) + '|')
    return '\n'.join(lines)


def print_table(columns, rows):
    print(format_table(columns, rows))
