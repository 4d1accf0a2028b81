from acceptance_support import TITLES, VERDICTS


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(TITLES):
        if number not in VERDICTS:
            tr.write_line(f"criterion {number:2d} {'NOT RUN':4s}  {TITLES[number]}")
            continue
        passed, detail = VERDICTS[number]
        tr.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {TITLES[number]}: {detail}")
