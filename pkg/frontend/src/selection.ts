/** Selection over glyphs: screen-rect marquee or nearest-glyph click. */

import { projectToScreen } from './camera.js'
import type { GaussianInfo, SelectionSpec } from './protocol.js'

export interface Rect {
  x0: number
  y0: number
  x1: number
  y1: number
}

export interface ProjectedGlyph {
  index: number
  x: number
  y: number
  confidence: number
  radius: number
}

export function projectGlyphs(
  glyphs: readonly GaussianInfo[], pose: number[][], focal: number,
  width: number, height: number,
): ProjectedGlyph[] {
  const out: ProjectedGlyph[] = []
  for (const g of glyphs) {
    const p = projectToScreen(pose, focal, width, height, g.mean)
    if (p === null) continue
    if (p.x < 0 || p.x > width || p.y < 0 || p.y > height) continue
    out.push({ index: g.index, x: p.x, y: p.y,
               confidence: g.confidence, radius: g.radius })
  }
  return out
}

/** Glyphs whose projected centers fall inside the marquee rectangle. */
export function selectInRect(glyphs: readonly ProjectedGlyph[],
                             rect: Rect): number[] {
  const xLo = Math.min(rect.x0, rect.x1)
  const xHi = Math.max(rect.x0, rect.x1)
  const yLo = Math.min(rect.y0, rect.y1)
  const yHi = Math.max(rect.y0, rect.y1)
  return glyphs
    .filter((g) => g.x >= xLo && g.x <= xHi && g.y >= yLo && g.y <= yHi)
    .map((g) => g.index)
    .sort((a, b) => a - b)
}

/** Nearest glyph within `pickRadius` pixels of the click, or none. */
export function selectByClick(glyphs: readonly ProjectedGlyph[],
                              x: number, y: number,
                              pickRadius = 8): number[] {
  let best = -1
  let bestD = pickRadius * pickRadius
  for (const g of glyphs) {
    const d = (g.x - x) ** 2 + (g.y - y) ** 2
    if (d < bestD || (d === bestD && best >= 0 && g.index < best)) {
      best = g.index
      bestD = d
    }
  }
  return best >= 0 ? [best] : []
}

export function toSelectionSpec(indices: readonly number[]): SelectionSpec {
  return { indices: [...indices] }
}
