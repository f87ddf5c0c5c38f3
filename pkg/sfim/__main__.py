from sfim.cli import app

app(prog_name="sfim")
