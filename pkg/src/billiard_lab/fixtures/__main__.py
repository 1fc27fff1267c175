from . import write_fixtures

write_fixtures()
