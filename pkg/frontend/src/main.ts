/** DOM shell: binds the editor app to the page's canvases and controls. */

import { ServiceClient } from './api.js'
import { EditorApp } from './app.js'
import { drawGlyphs, drawMarquee } from './glyphs.js'
import type { GestureMode } from './gestures.js'
import type { ProjectedGlyph } from './selection.js'

const SERVICE_URL = (window as { SERVICE_URL?: string }).SERVICE_URL
  ?? 'http://127.0.0.1:8754'

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id)
  if (!node) throw new Error(`missing #${id}`)
  return node as T
}

function boot(): void {
  const frameCanvas = el<HTMLCanvasElement>('frame')
  const overlayCanvas = el<HTMLCanvasElement>('overlay')
  const status = el<HTMLSpanElement>('status')
  const banner = el<HTMLDivElement>('banner')
  const toast = el<HTMLDivElement>('toast')
  const frameSlider = el<HTMLInputElement>('deform-frame')
  const overlayCtx = overlayCanvas.getContext('2d')!
  const frameCtx = frameCanvas.getContext('2d')!

  let glyphs: ProjectedGlyph[] = []
  let selected: ReadonlySet<number> = new Set()
  let marquee: { x0: number; y0: number; x1: number; y1: number } | null = null
  let mode: GestureMode = 'translate'
  const styles = { showSpheres: true, confidenceHeat: true }

  const app = new EditorApp(new ServiceClient(SERVICE_URL), {
    onFrame(png) {
      const blob = new Blob([png], { type: 'image/png' })
      const url = URL.createObjectURL(blob)
      const img = new Image()
      img.onload = () => {
        frameCtx.imageSmoothingEnabled = false
        frameCtx.drawImage(img, 0, 0, frameCanvas.width, frameCanvas.height)
        URL.revokeObjectURL(url)
      }
      img.src = url
    },
    onGlyphs(gs, sel) {
      glyphs = gs
      selected = sel
      redrawOverlay()
    },
    onStatus(text) {
      status.textContent = text
    },
    onBanner(visible, text) {
      banner.style.display = visible ? 'block' : 'none'
      if (text) banner.textContent = text
    },
    onToast(text) {
      toast.textContent = text
      toast.style.display = 'block'
      setTimeout(() => { toast.style.display = 'none' }, 2500)
    },
  })
  app.viewW = overlayCanvas.width
  app.viewH = overlayCanvas.height

  function redrawOverlay(): void {
    overlayCtx.clearRect(0, 0, overlayCanvas.width, overlayCanvas.height)
    drawGlyphs(overlayCtx, glyphs, selected, styles,
               app.focal / app.orbitState.distance)
    if (marquee) {
      drawMarquee(overlayCtx, marquee.x0, marquee.y0, marquee.x1, marquee.y1)
    }
  }

  for (const m of ['translate', 'rotate', 'scale'] as GestureMode[]) {
    el<HTMLButtonElement>(`mode-${m}`).onclick = () => { mode = m }
  }
  el<HTMLInputElement>('toggle-spheres').onchange = (e) => {
    styles.showSpheres = (e.target as HTMLInputElement).checked
    redrawOverlay()
  }
  el<HTMLInputElement>('toggle-heat').onchange = (e) => {
    styles.confidenceHeat = (e.target as HTMLInputElement).checked
    redrawOverlay()
  }
  frameSlider.oninput = () => { void app.scrub(Number(frameSlider.value)) }

  // Mouse: left drag = marquee select (plain) or gesture (with selection
  // and shift); right drag = orbit; wheel = zoom.
  let dragStart: { x: number; y: number } | null = null
  let gesturing = false
  overlayCanvas.onmousedown = (e) => {
    const rect = overlayCanvas.getBoundingClientRect()
    const x = e.clientX - rect.left
    const y = e.clientY - rect.top
    dragStart = { x, y }
    if (e.button === 0 && e.shiftKey && selected.size > 0) {
      gesturing = app.beginGesture(mode)
    } else if (e.button === 0) {
      marquee = { x0: x, y0: y, x1: x, y1: y }
    }
  }
  overlayCanvas.onmousemove = (e) => {
    if (!dragStart) return
    const rect = overlayCanvas.getBoundingClientRect()
    const x = e.clientX - rect.left
    const y = e.clientY - rect.top
    if (gesturing) {
      const scale = app.orbitState.distance / app.focal
      const dx = (x - dragStart.x) * scale
      const dy = -(y - dragStart.y) * scale
      if (mode === 'translate') {
        app.dragGesture({ t: [dx, dy, 0] })
      } else if (mode === 'rotate') {
        app.dragGesture({ angle: (x - dragStart.x) * 0.01 })
      } else {
        const f = Math.exp((y - dragStart.y) * -0.005)
        app.dragGesture({ factors: [f, f, f] })
      }
      dragStart = { x, y }
    } else if (marquee) {
      marquee.x1 = x
      marquee.y1 = y
      redrawOverlay()
    } else if (e.buttons & 2) {
      app.orbitBy((x - dragStart.x) * 0.01, (y - dragStart.y) * 0.01)
      dragStart = { x, y }
    }
  }
  overlayCanvas.onmouseup = (e) => {
    const rect = overlayCanvas.getBoundingClientRect()
    const x = e.clientX - rect.left
    const y = e.clientY - rect.top
    if (gesturing) {
      gesturing = false
      void app.endGesture()
    } else if (marquee) {
      const m = marquee
      marquee = null
      if (Math.abs(m.x1 - m.x0) < 3 && Math.abs(m.y1 - m.y0) < 3) {
        app.clickSelect(x, y)
      } else {
        app.marqueeSelect(m.x0, m.y0, m.x1, m.y1)
      }
    }
    dragStart = null
  }
  overlayCanvas.oncontextmenu = (e) => e.preventDefault()
  overlayCanvas.onwheel = (e) => {
    e.preventDefault()
    app.zoomBy(Math.exp(e.deltaY * 0.001))
  }

  void app.connect()
}

window.addEventListener('DOMContentLoaded', boot)
