"""Periodic table symbols and the fixed element color table."""

SYMBOLS = (
    "H", "He",
    "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar",
    "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr",
    "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd",
    "In", "Sn", "Sb", "Te", "I", "Xe",
    "Cs", "Ba",
    "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu",
    "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn",
    "Fr", "Ra",
    "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr",
    "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn",
    "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
)

ATOMIC_NUMBER = {sym: z for z, sym in enumerate(SYMBOLS, start=1)}

BACKGROUND = (255, 255, 255)
EDGE_COLOR = (128, 128, 128)


def _build_color_table():
    # additive recurrence on the plastic-number basis (R3 sequence), mapped into
    # [24, 232] per channel so no element is white or the edge gray
    g = 1.2207440846057596
    a = (1 / g, 1 / g ** 2, 1 / g ** 3)
    table = {}
    used = {BACKGROUND, EDGE_COLOR}
    step = 0
    for z in range(1, len(SYMBOLS) + 1):
        while True:
            step += 1
            rgb = tuple(24 + int(((0.5 + step * ai) % 1.0) * 209) for ai in a)
            if rgb not in used:
                break
        used.add(rgb)
        table[z] = rgb
    return table


COLOR_TABLE = _build_color_table()
