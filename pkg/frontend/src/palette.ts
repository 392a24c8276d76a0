// Heatmap rendering from the raw attention grid; uses the exact palette
// table the server paints PNGs with, so what the annotator sees matches
// what the metrics measure.

export type Palette = [number, number, number][];

/** Map one attention value in [0, 1] to the palette row the server uses. */
export function paletteIndex(value: number): number {
  const clamped = Math.min(Math.max(value, 0), 1);
  return Math.round(clamped * 255);
}

export interface RgbaGrid {
  data: Uint8ClampedArray<ArrayBuffer>;
  width: number;
  height: number;
}

/** Rasterize the raw grid at 1 pixel per cell; the canvas scales it up. */
export function attentionToRgba(grid: number[][], palette: Palette): RgbaGrid {
  const h = grid.length;
  const w = grid[0].length;
  const data = new Uint8ClampedArray(new ArrayBuffer(w * h * 4));
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const [r, g, b] = palette[paletteIndex(grid[y][x])];
      const o = (y * w + x) * 4;
      data[o] = r;
      data[o + 1] = g;
      data[o + 2] = b;
      data[o + 3] = 255;
    }
  }
  return { data, width: w, height: h };
}
