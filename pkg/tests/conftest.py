import torch

# One thread keeps timings comparable and reductions bitwise repeatable.
torch.set_num_threads(1)

# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary.
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
