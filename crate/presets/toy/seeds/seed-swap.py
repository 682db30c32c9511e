# seed: swap colors one and two
def transform(grid):
    swap = {1: 2, 2: 1}
    return [[swap.get(c, c) for c in row] for row in grid]
