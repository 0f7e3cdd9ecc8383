"""Print backbone BN-parameter and coefficient transmission sizes next to the published values."""

from fedmixstyle.catalog import format_table1

if __name__ == "__main__":
    print(format_table1())
