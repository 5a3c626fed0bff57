from mesofix.cli import run

run()
