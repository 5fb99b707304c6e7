/** Client-side glyph overlay: 2D sprites at projected Gaussian centers.
 *
 * Truth pixels always come from the service; the overlay only annotates
 * where primitives sit, so the browser never re-implements the renderer.
 */

import type { ProjectedGlyph } from './selection.js'

export interface GlyphStyle {
  showSpheres: boolean
  confidenceHeat: boolean
}

/** Blue (cold, low confidence) to red (hot, high confidence). */
export function confidenceColor(confidence: number): string {
  const c = Math.max(0, Math.min(1, confidence))
  const r = Math.round(40 + 215 * c)
  const b = Math.round(255 - 215 * c)
  return `rgb(${r},80,${b})`
}

export function drawGlyphs(
  ctx: CanvasRenderingContext2D,
  glyphs: readonly ProjectedGlyph[],
  selected: ReadonlySet<number>,
  style: GlyphStyle,
  pixelsPerUnit: number,
): void {
  if (!style.showSpheres) return
  for (const g of glyphs) {
    const r = Math.max(2, Math.min(24, g.radius * pixelsPerUnit))
    ctx.beginPath()
    ctx.arc(g.x, g.y, r, 0, Math.PI * 2)
    ctx.strokeStyle = style.confidenceHeat
      ? confidenceColor(g.confidence)
      : 'rgba(255,255,255,0.7)'
    ctx.lineWidth = selected.has(g.index) ? 2.5 : 1
    ctx.stroke()
    if (selected.has(g.index)) {
      ctx.beginPath()
      ctx.arc(g.x, g.y, 2.5, 0, Math.PI * 2)
      ctx.fillStyle = '#ffd54a'
      ctx.fill()
    }
  }
}

export function drawMarquee(ctx: CanvasRenderingContext2D,
                            x0: number, y0: number,
                            x1: number, y1: number): void {
  ctx.strokeStyle = 'rgba(255,213,74,0.9)'
  ctx.setLineDash([4, 3])
  ctx.strokeRect(Math.min(x0, x1), Math.min(y0, y1),
                 Math.abs(x1 - x0), Math.abs(y1 - y0))
  ctx.setLineDash([])
}
